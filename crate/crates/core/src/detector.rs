//! Single-level anchor-free detector: per-location class logits, box
//! distances and centerness, with its losses, decoding and NMS.
//!
//! Locations sit on a stride-8 grid; location `(gy, gx)` has its centre at
//! `((gx + 0.5) * stride, (gy + 0.5) * stride)` in pixels. Box distances
//! are `stride * exp(raw)`, so they are positive by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::iou;
use crate::nn::{conv_bias, conv_bias_specs, conv_norm_act, conv_norm_specs, Bound};
use crate::params::{init_params, ParamSpec, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::types::{sort_detections, BBox, Detection, DetectionSet, ImagePlane, LossWeights};

pub const STRIDE: usize = 8;
/// Number of stride-2 stages needed to reach [`STRIDE`].
const DOWN_STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Channels of the first stage; later stages use 2x and 4x.
    pub width: usize,
    /// Extra stride-1 blocks after the stride-8 stage.
    pub depth: usize,
    pub stride: usize,
    /// Softmax width, background included as class 0.
    pub num_classes: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            width: 8,
            depth: 1,
            stride: STRIDE,
            num_classes: 2,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::InvalidConfig("detector width must be positive".into()));
        }
        if self.stride != STRIDE {
            return Err(Error::InvalidConfig(format!(
                "detector stride {} unsupported (only {STRIDE})",
                self.stride
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(
                "num_classes counts background and needs at least one object class".into(),
            ));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let w = self.width;
        let top = 4 * w;
        let mut specs = Vec::new();
        specs.extend(conv_norm_specs("stem1", 3, w, 3));
        specs.extend(conv_norm_specs("stem2", w, 2 * w, 3));
        specs.extend(conv_norm_specs("stem3", 2 * w, top, 3));
        for i in 0..self.depth {
            specs.extend(conv_norm_specs(&format!("trunk{i}"), top, top, 3));
        }
        specs.extend(conv_bias_specs("head.cls", top, self.num_classes, 3));
        specs.extend(conv_bias_specs("head.reg", top, 4, 3));
        specs.extend(conv_bias_specs("head.ctr", top, 1, 3));
        specs
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        init_params(&self.param_specs(), seed)
    }

    pub fn grid(&self, height: usize, width: usize) -> Grid {
        let mut h = height;
        let mut w = width;
        for _ in 0..DOWN_STAGES {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        Grid {
            height: h,
            width: w,
            stride: self.stride,
        }
    }

    pub fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "detector", "config": self })
    }

    pub fn from_descriptor(v: &serde_json::Value) -> Result<Self> {
        if v.get("kind").and_then(|k| k.as_str()) != Some("detector") {
            return Err(Error::Checkpoint("not a detector checkpoint".into()));
        }
        let cfg: Self = serde_json::from_value(v["config"].clone())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Location grid of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn center(&self, loc: usize) -> (f64, f64) {
        let (gy, gx) = (loc / self.width, loc % self.width);
        let s = self.stride as f64;
        ((gx as f64 + 0.5) * s, (gy as f64 + 0.5) * s)
    }
}

/// Head outputs of one image, channel-major per head.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutputs {
    pub grid: Grid,
    pub num_classes: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// `[num_classes * L]`, logit of class `k` at location `l` at `k * L + l`.
    pub cls_logits: Vec<f64>,
    /// `[4 * L]` distances (left, top, right, bottom) in pixels.
    pub box_reg: Vec<f64>,
    /// `[L]`.
    pub centerness_logits: Vec<f64>,
}

/// Graph handles of the three heads (raw, before the box activation).
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub cls: Var,
    pub reg_raw: Var,
    pub ctr: Var,
}

/// Builds the detector on `input: [3, H, W]`, returning head handles and
/// the activated outputs.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &DetectorConfig,
    p: &Bound<'_, T>,
    input: Var,
) -> (HeadVars, DetectorOutputs) {
    let (_, h, w) = g.value(input).chw();
    let mut x = conv_norm_act(g, p, "stem1", input, 2);
    x = conv_norm_act(g, p, "stem2", x, 2);
    x = conv_norm_act(g, p, "stem3", x, 2);
    for i in 0..cfg.depth {
        x = conv_norm_act(g, p, &format!("trunk{i}"), x, 1);
    }
    let heads = HeadVars {
        cls: conv_bias(g, p, "head.cls", x),
        reg_raw: conv_bias(g, p, "head.reg", x),
        ctr: conv_bias(g, p, "head.ctr", x),
    };
    let grid = cfg.grid(h, w);
    debug_assert_eq!(g.value(heads.cls).chw(), (cfg.num_classes, grid.height, grid.width));
    let s = cfg.stride as f64;
    let outputs = DetectorOutputs {
        grid,
        num_classes: cfg.num_classes,
        image_height: h,
        image_width: w,
        cls_logits: g.value(heads.cls).to_f64_vec(),
        box_reg: g.value(heads.reg_raw).data().iter().map(|r| s * r.f64().exp()).collect(),
        centerness_logits: g.value(heads.ctr).to_f64_vec(),
    };
    (heads, outputs)
}

/// Turns output-space gradients into seeds for [`Graph::backward`].
pub fn head_seeds<T: Real>(
    heads: &HeadVars,
    outputs: &DetectorOutputs,
    grads: &OutputGrads,
) -> Vec<(Var, Tensor<T>)> {
    let g = outputs.grid;
    let shape = |c| [c, g.height, g.width];
    let d_raw: Vec<f64> = grads
        .box_reg
        .iter()
        .zip(&outputs.box_reg)
        .map(|(d, b)| d * b)
        .collect();
    vec![
        (heads.cls, Tensor::from_f64(&shape(outputs.num_classes), &grads.cls_logits)),
        (heads.reg_raw, Tensor::from_f64(&shape(4), &d_raw)),
        (heads.ctr, Tensor::from_f64(&shape(1), &grads.centerness_logits)),
    ]
}

pub fn image_tensor<T: Real>(img: &ImagePlane) -> Tensor<T> {
    Tensor::from_f64(&[img.channels(), img.height(), img.width()], &img.to_planar())
}

/// Inference on a 3-channel plane.
pub fn detector_forward<T: Real>(
    cfg: &DetectorConfig,
    params: &ParamStore<T>,
    img: &ImagePlane,
) -> Result<DetectorOutputs> {
    img.require_channels(3)?;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false);
    let x = g.leaf(image_tensor(img), false);
    Ok(forward_graph(&mut g, cfg, &p, x).1)
}

/// Per-location training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub grid: Grid,
    /// 0 = background, otherwise the box class.
    pub cls: Vec<usize>,
    /// (left, top, right, bottom) distances; zero at background.
    pub reg: Vec<[f64; 4]>,
    pub centerness: Vec<f64>,
    pub positive: Vec<bool>,
}

impl TargetAssignment {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| **p).count()
    }
}

/// A location is positive iff its centre lies strictly inside a box; among
/// several containing boxes the smallest area wins, then the
/// lexicographically smallest `(x, y, w, h, cls)`.
pub fn assign_targets(boxes: &[BBox], grid: Grid) -> TargetAssignment {
    let n = grid.len();
    let mut out = TargetAssignment {
        grid,
        cls: vec![0; n],
        reg: vec![[0.0; 4]; n],
        centerness: vec![0.0; n],
        positive: vec![false; n],
    };
    let key = |b: &BBox| (b.area(), b.x, b.y, b.w, b.h, b.cls);
    for loc in 0..n {
        let (cx, cy) = grid.center(loc);
        let mut best: Option<&BBox> = None;
        for b in boxes {
            let (l, t, r, btm) = (cx - b.x, cy - b.y, b.x2() - cx, b.y2() - cy);
            if l > 0.0 && t > 0.0 && r > 0.0 && btm > 0.0 {
                let better = match best {
                    None => true,
                    Some(cur) => key(b).partial_cmp(&key(cur)) == Some(std::cmp::Ordering::Less),
                };
                if better {
                    best = Some(b);
                }
            }
        }
        if let Some(b) = best {
            let d = [cx - b.x, cy - b.y, b.x2() - cx, b.y2() - cy];
            out.cls[loc] = b.cls as usize;
            out.reg[loc] = d;
            out.centerness[loc] = centerness_target(&d);
            out.positive[loc] = true;
        }
    }
    out
}

pub fn centerness_target(d: &[f64; 4]) -> f64 {
    let [l, t, r, b] = *d;
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressionKind {
    #[default]
    L1,
    L2,
}

/// Unweighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub cls: f64,
    pub reg: f64,
    pub ctr: f64,
}

impl LossTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_cls * self.cls + w.lambda_reg * self.reg + w.lambda_star * self.ctr
    }

    pub fn add(&mut self, o: &LossTerms) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.ctr += o.ctr;
    }

    pub fn scale(&mut self, k: f64) {
        self.cls *= k;
        self.reg *= k;
        self.ctr *= k;
    }
}

/// Gradients of a scalar loss w.r.t. each [`DetectorOutputs`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub cls_logits: Vec<f64>,
    pub box_reg: Vec<f64>,
    pub centerness_logits: Vec<f64>,
}

fn shape_err(what: &str, got: usize, want: usize) -> Error {
    Error::ShapeMismatch(format!("{what}: {got} values, expected {want}"))
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Mean over locations of `-(1 / N_cls) * log p_true`, background included.
pub fn classification_loss_with_grad(
    cls_logits: &[f64],
    num_classes: usize,
    targets: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if cls_logits.len() != num_classes * n {
        return Err(shape_err("cls_logits", cls_logits.len(), num_classes * n));
    }
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let norm = 1.0 / (n as f64 * num_classes as f64);
    let mut loss = 0.0;
    let mut grad = vec![0.0; cls_logits.len()];
    let mut z = vec![0.0; num_classes];
    for (loc, &y) in targets.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::ShapeMismatch(format!(
                "class target {y} with {num_classes} classes"
            )));
        }
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = cls_logits[k * n + loc];
        }
        let lp = log_softmax(&z);
        loss -= lp[y];
        for k in 0..num_classes {
            let ind = if k == y { 1.0 } else { 0.0 };
            grad[k * n + loc] = norm * (lp[k].exp() - ind);
        }
    }
    Ok((loss * norm, grad))
}

pub fn classification_loss(cls_logits: &[f64], num_classes: usize, targets: &[usize]) -> Result<f64> {
    Ok(classification_loss_with_grad(cls_logits, num_classes, targets)?.0)
}

/// Sum over positives of the L1 / squared distance error, divided by the
/// positive count. Zero when nothing is positive.
pub fn regression_loss_with_grad(
    box_reg: &[f64],
    targets: &[[f64; 4]],
    positive: &[bool],
    kind: RegressionKind,
) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if box_reg.len() != 4 * n {
        return Err(shape_err("box_reg", box_reg.len(), 4 * n));
    }
    if positive.len() != n {
        return Err(shape_err("positive mask", positive.len(), n));
    }
    let npos = positive.iter().filter(|p| **p).count();
    let mut grad = vec![0.0; box_reg.len()];
    if npos == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / npos as f64;
    let mut loss = 0.0;
    for loc in (0..n).filter(|&l| positive[l]) {
        for c in 0..4 {
            let d = box_reg[c * n + loc] - targets[loc][c];
            match kind {
                RegressionKind::L1 => {
                    loss += d.abs();
                    grad[c * n + loc] = inv * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
                }
                RegressionKind::L2 => {
                    loss += d * d;
                    grad[c * n + loc] = inv * 2.0 * d;
                }
            }
        }
    }
    Ok((loss * inv, grad))
}

pub fn regression_loss(
    box_reg: &[f64],
    targets: &[[f64; 4]],
    positive: &[bool],
    kind: RegressionKind,
) -> Result<f64> {
    Ok(regression_loss_with_grad(box_reg, targets, positive, kind)?.0)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean binary cross-entropy (from logits) over positive locations.
pub fn centerness_loss_with_grad(
    logits: &[f64],
    targets: &[f64],
    positive: &[bool],
) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if logits.len() != n || positive.len() != n {
        return Err(shape_err("centerness", logits.len(), n));
    }
    let npos = positive.iter().filter(|p| **p).count();
    let mut grad = vec![0.0; n];
    if npos == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / npos as f64;
    let mut loss = 0.0;
    for loc in (0..n).filter(|&l| positive[l]) {
        let (z, t) = (logits[loc], targets[loc]);
        loss += softplus(z) - t * z;
        grad[loc] = inv * (sigmoid(z) - t);
    }
    Ok((loss * inv, grad))
}

pub fn centerness_loss(logits: &[f64], targets: &[f64], positive: &[bool]) -> Result<f64> {
    Ok(centerness_loss_with_grad(logits, targets, positive)?.0)
}

/// Weighted total `λ_cls·L_cls + λ_reg·L_reg + λ_*·L_ctr`, the unweighted
/// terms, and the gradient of the total w.r.t. the outputs.
pub fn detection_loss_with_grad(
    out: &DetectorOutputs,
    tgt: &TargetAssignment,
    weights: &LossWeights,
    kind: RegressionKind,
) -> Result<(f64, LossTerms, OutputGrads)> {
    if out.grid != tgt.grid {
        return Err(Error::ShapeMismatch(format!(
            "outputs grid {:?} vs targets {:?}",
            out.grid, tgt.grid
        )));
    }
    let (cls, mut gc) = classification_loss_with_grad(&out.cls_logits, out.num_classes, &tgt.cls)?;
    let (reg, mut gr) = regression_loss_with_grad(&out.box_reg, &tgt.reg, &tgt.positive, kind)?;
    let (ctr, mut gt) = centerness_loss_with_grad(&out.centerness_logits, &tgt.centerness, &tgt.positive)?;
    gc.iter_mut().for_each(|v| *v *= weights.lambda_cls);
    gr.iter_mut().for_each(|v| *v *= weights.lambda_reg);
    gt.iter_mut().for_each(|v| *v *= weights.lambda_star);
    let terms = LossTerms { cls, reg, ctr };
    Ok((
        terms.weighted(weights),
        terms,
        OutputGrads {
            cls_logits: gc,
            box_reg: gr,
            centerness_logits: gt,
        },
    ))
}

pub fn detection_loss(
    out: &DetectorOutputs,
    tgt: &TargetAssignment,
    weights: &LossWeights,
    kind: RegressionKind,
) -> Result<(f64, LossTerms)> {
    let (total, terms, _) = detection_loss_with_grad(out, tgt, weights, kind)?;
    Ok((total, terms))
}

/// Score = class probability x centerness probability; boxes are clipped to
/// the canvas, thresholded and the top `max_dets` kept in score order.
pub fn decode_detections(out: &DetectorOutputs, score_thresh: f64, max_dets: usize) -> DetectionSet {
    let n = out.grid.len();
    let mut dets = DetectionSet::new();
    let mut z = vec![0.0; out.num_classes];
    for loc in 0..n {
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = out.cls_logits[k * n + loc];
        }
        let lp = log_softmax(&z);
        let ctr = sigmoid(out.centerness_logits[loc]);
        let (cx, cy) = out.grid.center(loc);
        let d = |c: usize| out.box_reg[c * n + loc];
        for (k, lpk) in lp.iter().enumerate().skip(1) {
            let score = lpk.exp() * ctr;
            if score.is_nan() || score < score_thresh {
                continue;
            }
            let raw = BBox::from_corners(k as u32, cx - d(0), cy - d(1), cx + d(2), cy + d(3));
            if let Some(b) = raw.and_then(|b| b.clip(out.image_height, out.image_width)) {
                dets.push(Detection { bbox: b, score });
            }
        }
    }
    sort_detections(&mut dets);
    dets.truncate(max_dets);
    dets
}

/// Greedy per-class suppression of detections sorted by descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> DetectionSet {
    let mut keep: DetectionSet = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.bbox.cls == d.bbox.cls && iou(&k.bbox, &d.bbox) >= iou_thresh);
        if !suppressed {
            keep.push(*d);
        }
    }
    keep
}

/// Thresholds used whenever predictions are turned into detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

/// decode -> NMS -> top-k.
pub fn postprocess(out: &DetectorOutputs, cfg: &DecodeConfig) -> DetectionSet {
    let all = decode_detections(out, cfg.score_thresh, usize::MAX);
    let mut kept = nms(&all, cfg.nms_iou);
    kept.truncate(cfg.max_dets);
    kept
}

/// A detector configuration with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore<f32>,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: config.init(seed),
        })
    }

    pub fn forward(&self, img: &ImagePlane) -> Result<DetectorOutputs> {
        detector_forward(&self.config, &self.params, img)
    }

    pub fn detect(&self, img: &ImagePlane, cfg: &DecodeConfig) -> Result<DetectionSet> {
        Ok(postprocess(&self.forward(img)?, cfg))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path, &self.config.descriptor())
    }

    /// Loads a checkpoint, validating the architecture descriptor against
    /// the stored tensors.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, desc) = ParamStore::<f32>::load(path)?;
        let config = DetectorConfig::from_descriptor(&desc)?;
        check_layout(&params, &config.param_specs())?;
        Ok(Self { config, params })
    }
}

pub(crate) fn check_layout<T: Real>(params: &ParamStore<T>, specs: &[ParamSpec]) -> Result<()> {
    if params.len() != specs.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors, architecture expects {}",
            params.len(),
            specs.len()
        )));
    }
    for ((name, t), s) in params.iter().zip(specs) {
        if name != s.name || t.shape() != s.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {:?} does not match {} {:?}",
                t.shape(),
                s.name,
                s.shape
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use crate::types::Modality;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny() -> DetectorConfig {
        DetectorConfig {
            width: 2,
            depth: 1,
            stride: STRIDE,
            num_classes: 2,
        }
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> ImagePlane {
        let mut rng = derive_rng(seed, 0);
        let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        ImagePlane::new(h, w, 3, data, Modality::Rgb).unwrap()
    }

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(1, x, y, w, h).unwrap()
    }

    #[test]
    fn grid_shape() {
        let g = DetectorConfig::default().grid(96, 128);
        assert_eq!((g.height, g.width), (12, 16));
        let g = DetectorConfig::default().grid(90, 121);
        assert_eq!((g.height, g.width), (12, 16));
    }

    #[test]
    fn forward_is_deterministic_with_expected_shapes() {
        let cfg = tiny();
        let p: ParamStore<f32> = cfg.init(3);
        let img = noise_image(96, 128, 1);
        let a = detector_forward(&cfg, &p, &img).unwrap();
        let b = detector_forward(&cfg, &p, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cls_logits.len(), 2 * 12 * 16);
        assert_eq!(a.box_reg.len(), 4 * 12 * 16);
        assert!(a.box_reg.iter().all(|d| *d > 0.0));
        let gray = ImagePlane::filled(8, 8, Modality::Ir, 0.5).unwrap();
        assert!(matches!(
            detector_forward(&cfg, &p, &gray),
            Err(Error::WrongChannelCount { .. })
        ));
    }

    #[test]
    fn untrained_detections_stay_inside_canvas() {
        let cfg = tiny();
        let p: ParamStore<f32> = cfg.init(5);
        let img = noise_image(40, 56, 2);
        let out = detector_forward(&cfg, &p, &img).unwrap();
        for d in decode_detections(&out, 0.0, usize::MAX) {
            assert!(d.bbox.x >= 0.0 && d.bbox.y >= 0.0);
            assert!(d.bbox.x2() <= 56.0 && d.bbox.y2() <= 40.0);
        }
    }

    #[test]
    fn assignment_examples() {
        let grid = DetectorConfig::default().grid(32, 48);
        let empty = assign_targets(&[], grid);
        assert_eq!(empty.num_positive(), 0);
        assert!(empty.cls.iter().all(|c| *c == 0));

        let full = assign_targets(&[bx(0.0, 0.0, 48.0, 32.0)], grid);
        assert_eq!(full.num_positive(), grid.len());
        assert!(full.reg.iter().flatten().all(|d| *d > 0.0));

        // Box centred on location (1, 2): centre (20, 12).
        let centred = assign_targets(&[bx(14.0, 4.0, 12.0, 16.0)], grid);
        let loc = grid.width + 2;
        assert!(centred.positive[loc]);
        assert!((centred.centerness[loc] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smaller_box_wins_overlaps() {
        let grid = DetectorConfig::default().grid(32, 32);
        let big = bx(0.0, 0.0, 32.0, 32.0);
        let small = BBox { cls: 1, ..bx(8.0, 8.0, 8.0, 8.0) };
        let t = assign_targets(&[big, small], grid);
        let loc = grid.width + 1; // centre (12, 12)
        assert_eq!(t.reg[loc], [4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn classification_loss_examples() {
        // one-hot logits at saturation.
        let (l, _) = classification_loss_with_grad(&[-800.0, 800.0], 2, &[1]).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = classification_loss_with_grad(&[0.0, 0.0], 2, &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
        let (l1, _) = classification_loss_with_grad(&[0.0, 0.0], 2, &[1]).unwrap();
        assert!((l1 - 0.34657359).abs() < 1e-8);
        let mut prev = f64::INFINITY;
        for z in [-2.0, -1.0, 0.0, 1.0, 3.0] {
            let l = classification_loss(&[0.0, z], 2, &[1]).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(matches!(
            classification_loss(&[0.0; 3], 2, &[1]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn regression_loss_examples() {
        let y = [[1.0, 2.0, 3.0, 4.0]];
        let pos = [true];
        let exact = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(regression_loss(&exact, &y, &pos, RegressionKind::L1).unwrap(), 0.0);
        let off1 = [2.0, 2.0, 3.0, 4.0];
        assert_eq!(regression_loss(&off1, &y, &pos, RegressionKind::L1).unwrap(), 1.0);
        assert_eq!(regression_loss(&off1, &y, &pos, RegressionKind::L2).unwrap(), 1.0);
        let off2 = [3.0, 2.0, 3.0, 4.0];
        assert_eq!(regression_loss(&off2, &y, &pos, RegressionKind::L2).unwrap(), 4.0);
        assert_eq!(regression_loss(&off2, &y, &[false], RegressionKind::L1).unwrap(), 0.0);
        assert!(regression_loss(&off2[..3], &y, &pos, RegressionKind::L1).is_err());
    }

    #[test]
    fn centerness_loss_examples() {
        let l = centerness_loss(&[40.0, -40.0], &[1.0, 0.0], &[true, true]).unwrap();
        assert!(l <= 1e-6);
        assert_eq!(centerness_loss(&[0.3], &[0.7], &[false]).unwrap(), 0.0);
        let l = centerness_loss(&[0.0], &[1.0], &[true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    fn sample_outputs(seed: u64) -> (DetectorOutputs, TargetAssignment) {
        let cfg = tiny();
        let p: ParamStore<f64> = cfg.init(seed);
        let img = noise_image(32, 32, seed);
        let out = detector_forward(&cfg, &p, &img).unwrap();
        let tgt = assign_targets(&[bx(3.0, 2.0, 10.0, 20.0), bx(18.0, 12.0, 12.0, 14.0)], out.grid);
        (out, tgt)
    }

    #[test]
    fn weighted_total_masks_terms() {
        let (out, tgt) = sample_outputs(1);
        let kind = RegressionKind::L1;
        let (t, terms) = detection_loss(&out, &tgt, &LossWeights::new(1.0, 0.0, 0.0).unwrap(), kind).unwrap();
        assert_eq!(t, terms.cls);
        let (t, terms) = detection_loss(&out, &tgt, &LossWeights::new(0.0, 1.0, 0.0).unwrap(), kind).unwrap();
        assert_eq!(t, terms.reg);
        let (t, terms) = detection_loss(&out, &tgt, &LossWeights::default(), kind).unwrap();
        assert_eq!(t, 0.01 * terms.cls + 0.1 * terms.reg + 0.1 * terms.ctr);
    }

    #[test]
    fn total_is_linear_in_each_weight() {
        let (out, tgt) = sample_outputs(2);
        let kind = RegressionKind::L2;
        let base = LossWeights::new(0.3, 0.2, 0.1).unwrap();
        let (t0, terms) = detection_loss(&out, &tgt, &base, kind).unwrap();
        let (t1, _) = detection_loss(&out, &tgt, &LossWeights { lambda_reg: 0.7, ..base }, kind).unwrap();
        assert!((t1 - t0 - 0.5 * terms.reg).abs() < 1e-12);
        let (t2, _) = detection_loss(&out, &tgt, &LossWeights { lambda_cls: 1.3, ..base }, kind).unwrap();
        assert!((t2 - t0 - 1.0 * terms.cls).abs() < 1e-12);
    }

    #[test]
    fn output_gradients_match_finite_differences() {
        let (out, tgt) = sample_outputs(3);
        let w = LossWeights::new(0.7, 0.2, 0.4).unwrap();
        let kind = RegressionKind::L2;
        let (_, _, g) = detection_loss_with_grad(&out, &tgt, &w, kind).unwrap();
        let f = |o: &DetectorOutputs| detection_loss(o, &tgt, &w, kind).unwrap().0;
        let h = 1e-6;
        for i in (0..out.cls_logits.len()).step_by(7) {
            let (mut p, mut m) = (out.clone(), out.clone());
            p.cls_logits[i] += h;
            m.cls_logits[i] -= h;
            assert!(((f(&p) - f(&m)) / (2.0 * h) - g.cls_logits[i]).abs() < 1e-8);
        }
        for i in 0..out.box_reg.len() {
            let (mut p, mut m) = (out.clone(), out.clone());
            p.box_reg[i] += h;
            m.box_reg[i] -= h;
            assert!(((f(&p) - f(&m)) / (2.0 * h) - g.box_reg[i]).abs() < 1e-7);
        }
        for i in 0..out.centerness_logits.len() {
            let (mut p, mut m) = (out.clone(), out.clone());
            p.centerness_logits[i] += h;
            m.centerness_logits[i] -= h;
            assert!(((f(&p) - f(&m)) / (2.0 * h) - g.centerness_logits[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn input_directional_derivative_matches_finite_differences() {
        let cfg = tiny();
        let params: ParamStore<f64> = cfg.init(9);
        let img = noise_image(32, 32, 4);
        let boxes = [bx(3.0, 2.0, 10.0, 20.0)];
        let w = LossWeights::new(1.0, 0.1, 0.5).unwrap();
        let loss_at = |x: &Tensor<f64>| -> (f64, Tensor<f64>) {
            let mut g = Graph::new();
            let p = Bound::new(&mut g, &params, false);
            let xv = g.leaf(x.clone(), true);
            let (heads, out) = forward_graph(&mut g, &cfg, &p, xv);
            let tgt = assign_targets(&boxes, out.grid);
            let (l, _, og) = detection_loss_with_grad(&out, &tgt, &w, RegressionKind::L2).unwrap();
            let seeds = head_seeds::<f64>(&heads, &out, &og);
            let refs: Vec<(Var, &Tensor<f64>)> = seeds.iter().map(|(v, t)| (*v, t)).collect();
            let mut grads = g.backward(&refs);
            (l, grads.take(xv).unwrap())
        };
        let x0 = image_tensor::<f64>(&img);
        let (_, grad) = loss_at(&x0);
        let mut rng = derive_rng(77, 0);
        for _ in 0..3 {
            let dir: Vec<f64> = (0..x0.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let analytic: f64 = grad.data().iter().zip(&dir).map(|(a, b)| a * b).sum();
            let h = 1e-5;
            let shift = |s: f64| {
                let d: Vec<f64> = x0.data().iter().zip(&dir).map(|(x, v)| x + s * v).collect();
                loss_at(&Tensor::from_vec(x0.shape(), d)).0
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
            assert!(rel < 1e-3, "fd {fd} analytic {analytic}");
        }
    }

    #[test]
    fn decode_recovers_hand_encoded_box() {
        let grid = DetectorConfig::default().grid(32, 32);
        let n = grid.len();
        let mut out = DetectorOutputs {
            grid,
            num_classes: 2,
            image_height: 32,
            image_width: 32,
            cls_logits: vec![0.0; 2 * n],
            box_reg: vec![1.0; 4 * n],
            centerness_logits: vec![-30.0; n],
        };
        for v in out.cls_logits[..n].iter_mut() {
            *v = 30.0;
        }
        assert!(decode_detections(&out, 0.05, 100).is_empty());
        // Location (2, 1): centre (12, 20). Target box x 5..19, y 9..27.
        let loc = 2 * grid.width + 1;
        out.cls_logits[loc] = -30.0;
        out.cls_logits[n + loc] = 30.0;
        out.centerness_logits[loc] = 30.0;
        for (c, d) in [7.0, 11.0, 7.0, 7.0].into_iter().enumerate() {
            out.box_reg[c * n + loc] = d;
        }
        let dets = decode_detections(&out, 0.05, 100);
        assert_eq!(dets.len(), 1);
        let b = dets[0].bbox;
        for (got, want) in [(b.x, 5.0), (b.y, 9.0), (b.x2(), 19.0), (b.y2(), 27.0)] {
            assert!((got - want).abs() <= 0.5);
        }
    }

    #[test]
    fn decode_orders_by_score() {
        let cfg = tiny();
        let p: ParamStore<f32> = cfg.init(8);
        let out = detector_forward(&cfg, &p, &noise_image(48, 48, 8)).unwrap();
        let dets = decode_detections(&out, 0.0, 20);
        assert!(dets.len() <= 20);
        assert!(dets.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn nms_examples() {
        let a = Detection { bbox: bx(0.0, 0.0, 10.0, 10.0), score: 0.9 };
        let b = Detection { score: 0.8, ..a };
        assert_eq!(nms(&[a, b], 0.5), vec![a]);
        let c = Detection { bbox: bx(20.0, 20.0, 5.0, 5.0), score: 0.7 };
        assert_eq!(nms(&[a, c], 0.5), vec![a, c]);
        let other = Detection { bbox: BBox { cls: 2, ..a.bbox }, score: 0.6 };
        assert_eq!(nms(&[a, other], 0.5).len(), 2);
    }

    /// The unique subset K with: i in K iff no earlier same-class j in K
    /// overlaps i at or above the threshold.
    fn nms_oracle(dets: &[Detection], t: f64) -> Vec<usize> {
        let n = dets.len();
        let mut found = Vec::new();
        for mask in 0u32..(1 << n) {
            let inside = |i: usize| mask & (1 << i) != 0;
            let consistent = (0..n).all(|i| {
                let blocked = (0..i).any(|j| {
                    inside(j) && dets[j].bbox.cls == dets[i].bbox.cls && iou(&dets[j].bbox, &dets[i].bbox) >= t
                });
                inside(i) == !blocked
            });
            if consistent {
                found.push((0..n).filter(|&i| inside(i)).collect::<Vec<_>>());
            }
        }
        assert_eq!(found.len(), 1);
        found.pop().unwrap()
    }

    proptest! {
        #[test]
        fn nms_matches_exhaustive_reference(
            raw in proptest::collection::vec((0.0..12.0f64, 0.0..12.0f64, 2.0..8.0f64, 2.0..8.0f64, 1u32..3, 0.0..1.0f64), 0..6),
            t in 0.2..0.8f64,
        ) {
            let mut dets: DetectionSet = raw.iter().map(|&(x, y, w, h, c, s)| Detection {
                bbox: BBox::new(c, x, y, w, h).unwrap(), score: s }).collect();
            sort_detections(&mut dets);
            let want: Vec<Detection> = nms_oracle(&dets, t).into_iter().map(|i| dets[i]).collect();
            prop_assert_eq!(nms(&dets, t), want);
        }

        #[test]
        fn assignment_is_permutation_invariant(
            raw in proptest::collection::vec((0.0..30.0f64, 0.0..30.0f64, 3.0..20.0f64, 3.0..20.0f64), 0..5),
            rot in 0usize..5,
        ) {
            let grid = DetectorConfig::default().grid(40, 40);
            let boxes: Vec<BBox> = raw.iter().map(|&(x, y, w, h)| bx(x, y, w, h)).collect();
            let mut perm = boxes.clone();
            if !perm.is_empty() {
                let k = rot % perm.len();
                perm.rotate_left(k);
                perm.reverse();
            }
            prop_assert_eq!(assign_targets(&boxes, grid), assign_targets(&perm, grid));
        }
    }

    #[test]
    fn checkpoint_validates_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        let det = Detector::new(tiny(), 1).unwrap();
        det.save(&path).unwrap();
        let back = Detector::load(&path).unwrap();
        assert_eq!(back, det);

        let wrong = DetectorConfig { width: 3, ..tiny() };
        det.params.save(&path, &wrong.descriptor()).unwrap();
        assert!(Detector::load(&path).is_err());
    }
}
