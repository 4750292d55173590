//! Training regimes: RGB pretraining, IR fine-tuning, translator training
//! through a frozen detector, and the reconstruction-trained translator.

pub mod gradcheck;
pub mod optim;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classic::{gray_to_3ch, ClassicMethod};
use crate::data::subset_fraction;
use crate::detector::{
    self, assign_targets, detection_loss_with_grad, head_seeds, image_tensor, DecodeConfig, Detector,
    DetectorConfig, LossTerms, RegressionKind,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hallucinet::{self, ir_tensor, l1_with_grad, HalluciNet, HalluciNetConfig};
use crate::metrics::average_precision_at_50;
use crate::nn::Bound;
use crate::params::ParamStore;
use crate::rng::{derive_rng, streams};
use crate::tensor::{Real, Tensor};
use crate::types::{BBox, Dataset, DetectionSet, ImagePlane, LossWeights};

pub use gradcheck::{gradient_check, ProbeResult};
pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub regression: RegressionKind,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::default(),
            weights: LossWeights::default(),
            regression: RegressionKind::L1,
            seed: 0,
            train_fraction: 1.0,
            val_fraction: 0.2,
            decode: DecodeConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Zero epochs is allowed and returns the initial parameters.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::BadFraction(self.train_fraction));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidConfig(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean unweighted detection terms (zero for reconstruction training).
    pub terms: LossTerms,
    /// Mean optimized objective.
    pub loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: String,
    pub epochs: Vec<EpochRecord>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    /// Validation AP@50 of the selected parameters (negated L1 for the
    /// reconstruction translator, see `selection_metric`).
    pub best_val_ap: f64,
    pub selection_metric: String,
    pub initial_digest: String,
    pub final_digest: String,
    pub frozen_digest_before: Option<String>,
    pub frozen_digest_after: Option<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub wall_clock_secs: f64,
}

/// Seeded 80/20-style split, then `train_fraction` of the training part.
pub fn split_train_val(data: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = data.len();
    let n_val = if n < 2 { 0 } else { ((cfg.val_fraction * n as f64).round() as usize).min(n - 1) };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(cfg.seed, streams::SPLIT));
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let pick = |idx: &[usize]| Dataset::new(idx.iter().map(|&i| data.samples[i].clone()).collect());
    let train = subset_fraction(&pick(&train_idx), cfg.train_fraction, cfg.seed)?;
    Ok((train, pick(&val_idx)))
}

/// Per-sample objective, its unweighted terms and parameter gradients.
type SampleGrad<T> = (f64, LossTerms, Vec<Tensor<T>>);

struct LoopOutcome {
    params: ParamStore<f32>,
    epochs: Vec<EpochRecord>,
    best_epoch: usize,
    best_val: f64,
}

/// Mini-batch loop with per-epoch validation and best-epoch selection.
/// Gradients are summed in sample order and averaged over the batch.
fn run_loop<S, G, V>(
    init: ParamStore<f32>,
    train: &[S],
    cfg: &TrainConfig,
    mut sample_grad: G,
    mut validate: V,
) -> Result<LoopOutcome>
where
    G: FnMut(&ParamStore<f32>, &S) -> Result<SampleGrad<f32>>,
    V: FnMut(&ParamStore<f32>) -> Result<f64>,
{
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &params);
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(cfg.seed, streams::SHUFFLE_BASE + epoch as u64));
        let mut terms = LossTerms::default();
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            for &i in batch {
                let (loss, t, grads) = sample_grad(&params, &train[i])?;
                if !loss.is_finite() || !grads.iter().all(Tensor::all_finite) {
                    return Err(Error::Divergence { epoch, step });
                }
                loss_sum += loss;
                terms.add(&t);
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let inv = 1.0 / batch.len() as f32;
            let mean: Vec<Tensor<f32>> = acc
                .expect("non-empty batch")
                .into_iter()
                .map(|g| g.map(|v| v * inv))
                .collect();
            opt.step(&mut params, &mean);
        }
        let n = train.len() as f64;
        terms.scale(1.0 / n);
        let val_metric = validate(&params)?;
        epochs.push(EpochRecord {
            epoch,
            terms,
            loss: loss_sum / n,
            val_metric,
        });
        if best.as_ref().is_none_or(|(_, b, _)| val_metric > *b) {
            best = Some((epoch, val_metric, params.clone()));
        }
    }
    Ok(match best {
        Some((best_epoch, best_val, p)) => LoopOutcome { params: p, epochs, best_epoch, best_val },
        None => {
            let v = validate(&params)?;
            LoopOutcome { params, epochs, best_epoch: 0, best_val: v }
        }
    })
}

/// Loss and `θ` gradients of the detection objective for one image.
pub fn detector_sample_grad<T: Real>(
    det_cfg: &DetectorConfig,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    boxes: &[BBox],
    weights: &LossWeights,
    kind: RegressionKind,
) -> Result<SampleGrad<T>> {
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, true);
    let x = g.leaf(input.clone(), false);
    let (heads, out) = detector::forward_graph(&mut g, det_cfg, &p, x);
    let tgt = assign_targets(boxes, out.grid);
    let (loss, terms, og) = detection_loss_with_grad(&out, &tgt, weights, kind)?;
    let seeds = head_seeds::<T>(&heads, &out, &og);
    let mut grads = backward(&g, &seeds);
    Ok((loss, terms, p.take_grads(&mut grads)))
}

/// Loss and `ϑ` gradients of the detection objective evaluated on the
/// translated image, with `θ` mounted as constants.
#[allow(clippy::too_many_arguments)]
pub fn hallucination_sample_grad<T: Real>(
    net_cfg: &HalluciNetConfig,
    net: &ParamStore<T>,
    det_cfg: &DetectorConfig,
    det: &ParamStore<T>,
    ir: &Tensor<T>,
    boxes: &[BBox],
    weights: &LossWeights,
    kind: RegressionKind,
) -> Result<SampleGrad<T>> {
    let mut g = Graph::new();
    let pd = Bound::new(&mut g, det, false);
    let pn = Bound::new(&mut g, net, true);
    let x = g.leaf(ir.clone(), false);
    let h = hallucinet::forward_graph(&mut g, net_cfg, &pn, x);
    let (heads, out) = detector::forward_graph(&mut g, det_cfg, &pd, h.image);
    let tgt = assign_targets(boxes, out.grid);
    let (loss, terms, og) = detection_loss_with_grad(&out, &tgt, weights, kind)?;
    let seeds = head_seeds::<T>(&heads, &out, &og);
    let mut grads = backward(&g, &seeds);
    Ok((loss, terms, pn.take_grads(&mut grads)))
}

/// L1 reconstruction loss and `ϑ` gradients for one pair.
pub fn reconstruction_sample_grad<T: Real>(
    net_cfg: &HalluciNetConfig,
    net: &ParamStore<T>,
    ir: &Tensor<T>,
    target_planar: &[f64],
) -> SampleGrad<T> {
    let mut g = Graph::new();
    let pn = Bound::new(&mut g, net, true);
    let x = g.leaf(ir.clone(), false);
    let h = hallucinet::forward_graph(&mut g, net_cfg, &pn, x);
    let (loss, seed) = l1_with_grad(g.value(h.image), target_planar);
    let mut grads = g.backward(&[(h.image, &seed)]);
    (loss, LossTerms::default(), pn.take_grads(&mut grads))
}

fn backward<T: Real>(g: &Graph<T>, seeds: &[(Var, Tensor<T>)]) -> crate::graph::Gradients<T> {
    let refs: Vec<(Var, &Tensor<T>)> = seeds.iter().map(|(v, t)| (*v, t)).collect();
    g.backward(&refs)
}

fn report(
    regime: &str,
    out: &LoopOutcome,
    initial: String,
    selection_metric: &str,
    n_train: usize,
    n_val: usize,
    start: Instant,
) -> TrainReport {
    TrainReport {
        regime: regime.into(),
        epochs: out.epochs.clone(),
        best_epoch: out.best_epoch,
        best_val_ap: out.best_val,
        selection_metric: selection_metric.into(),
        initial_digest: initial,
        final_digest: out.params.digest(),
        frozen_digest_before: None,
        frozen_digest_after: None,
        n_train,
        n_val,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    }
}

/// AP@50 of a detector over already translated 3-channel inputs.
fn detector_ap(
    det_cfg: &DetectorConfig,
    params: &ParamStore<f32>,
    inputs: &[ImagePlane],
    gts: &[Vec<BBox>],
    decode: &DecodeConfig,
) -> Result<f64> {
    if gts.iter().all(Vec::is_empty) {
        return Ok(0.0);
    }
    let dets = inputs
        .iter()
        .map(|img| Ok(detector::postprocess(&detector::detector_forward(det_cfg, params, img)?, decode)))
        .collect::<Result<Vec<_>>>()?;
    average_precision_at_50(&dets, gts)
}

fn train_detector(
    regime: &str,
    det_cfg: &DetectorConfig,
    init: ParamStore<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    to_input: impl Fn(&crate::types::PairedSample) -> Result<ImagePlane>,
) -> Result<(Detector, TrainReport)> {
    cfg.validate()?;
    det_cfg.validate()?;
    let start = Instant::now();
    let (train, val) = split_train_val(data, cfg)?;
    let train_inputs: Vec<(Tensor<f32>, Vec<BBox>)> = train
        .iter()
        .map(|s| Ok((image_tensor(&to_input(s)?), s.boxes.clone())))
        .collect::<Result<_>>()?;
    let val_inputs: Vec<ImagePlane> = val.iter().map(&to_input).collect::<Result<_>>()?;
    let val_gts: Vec<Vec<BBox>> = val.iter().map(|s| s.boxes.clone()).collect();
    let initial = init.digest();
    let out = run_loop(
        init,
        &train_inputs,
        cfg,
        |p, (x, boxes)| detector_sample_grad(det_cfg, p, x, boxes, &cfg.weights, cfg.regression),
        |p| detector_ap(det_cfg, p, &val_inputs, &val_gts, &cfg.decode),
    )?;
    let rep = report(regime, &out, initial, "val_ap50", train.len(), val.len(), start);
    Ok((Detector { config: *det_cfg, params: out.params }, rep))
}

/// Trains `θ` from scratch on the RGB planes.
pub fn pretrain_rgb_detector(
    data: &Dataset,
    det_cfg: &DetectorConfig,
    cfg: &TrainConfig,
) -> Result<(Detector, TrainReport)> {
    det_cfg.validate()?;
    let init = det_cfg.init(cfg.seed);
    train_detector("pretrain", det_cfg, init, data, cfg, |s| Ok(s.rgb.clone()))
}

/// Continues training every `θ` entry on IR replicated to three channels.
pub fn finetune_ir_detector(
    init: &Detector,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Detector, TrainReport)> {
    train_detector("finetune", &init.config, init.params.clone(), data, cfg, |s| gray_to_3ch(&s.ir))
}

/// Optimizes the translator through the frozen detector. The detector digest
/// is compared before and after; any difference is an error.
pub fn train_hallucidet(
    detector: &Detector,
    data: &Dataset,
    net_cfg: &HalluciNetConfig,
    cfg: &TrainConfig,
) -> Result<(HalluciNet, TrainReport)> {
    cfg.validate()?;
    net_cfg.validate()?;
    let start = Instant::now();
    let before = detector.params.digest();
    let (train, val) = split_train_val(data, cfg)?;
    let train_inputs: Vec<(Tensor<f32>, Vec<BBox>)> = train
        .iter()
        .map(|s| Ok((ir_tensor(&s.ir)?, s.boxes.clone())))
        .collect::<Result<_>>()?;
    let val_gts: Vec<Vec<BBox>> = val.iter().map(|s| s.boxes.clone()).collect();
    let init: ParamStore<f32> = net_cfg.init(cfg.seed);
    let initial = init.digest();
    let (dc, dp) = (&detector.config, &detector.params);
    let out = run_loop(
        init,
        &train_inputs,
        cfg,
        |p, (x, boxes)| {
            hallucination_sample_grad(net_cfg, p, dc, dp, x, boxes, &cfg.weights, cfg.regression)
        },
        |p| {
            let inputs = val
                .iter()
                .map(|s| hallucinet::hallucinate(net_cfg, p, &s.ir))
                .collect::<Result<Vec<_>>>()?;
            detector_ap(dc, dp, &inputs, &val_gts, &cfg.decode)
        },
    )?;
    let after = detector.params.digest();
    if after != before {
        return Err(Error::FrozenParamViolation { before, after });
    }
    let mut rep = report("hallucidet", &out, initial, "val_ap50", train.len(), val.len(), start);
    rep.frozen_digest_before = Some(before);
    rep.frozen_digest_after = Some(after);
    Ok((HalluciNet { config: net_cfg.clone(), params: out.params }, rep))
}

/// Optimizes the translator toward the paired RGB image (mean absolute
/// error). Selection uses the validation L1, reported negated.
pub fn train_reconstruction_translator(
    data: &Dataset,
    net_cfg: &HalluciNetConfig,
    cfg: &TrainConfig,
) -> Result<(HalluciNet, TrainReport)> {
    cfg.validate()?;
    net_cfg.validate()?;
    let start = Instant::now();
    let (train, val) = split_train_val(data, cfg)?;
    let train_inputs: Vec<(Tensor<f32>, Vec<f64>)> = train
        .iter()
        .map(|s| Ok((ir_tensor(&s.ir)?, s.rgb.to_planar())))
        .collect::<Result<_>>()?;
    let init: ParamStore<f32> = net_cfg.init(cfg.seed);
    let initial = init.digest();
    let out = run_loop(
        init,
        &train_inputs,
        cfg,
        |p, (x, target)| Ok(reconstruction_sample_grad(net_cfg, p, x, target)),
        |p| {
            if val.is_empty() {
                return Ok(0.0);
            }
            let mut total = 0.0;
            for s in val.iter() {
                let pred = hallucinet::hallucinate(net_cfg, p, &s.ir)?;
                total += hallucinet::reconstruction_loss(&pred, &s.rgb)?;
            }
            Ok(-total / val.len() as f64)
        },
    )?;
    let rep = report("recon", &out, initial, "neg_val_l1", train.len(), val.len(), start);
    Ok((HalluciNet { config: net_cfg.clone(), params: out.params }, rep))
}

/// How an IR plane is turned into detector input.
#[derive(Debug, Clone)]
pub enum Translator {
    Classic(ClassicMethod),
    Net(HalluciNet),
}

impl Translator {
    pub fn gray() -> Self {
        Self::Classic(ClassicMethod::gray())
    }

    pub fn translate(&self, ir: &ImagePlane) -> Result<ImagePlane> {
        match self {
            Self::Classic(m) => m.apply(ir),
            Self::Net(n) => n.hallucinate(ir),
        }
    }
}

/// Post-processed detections for every sample of `data`.
pub fn predict(
    translator: Option<&Translator>,
    detector: &Detector,
    data: &Dataset,
    decode: &DecodeConfig,
) -> Result<Vec<DetectionSet>> {
    let gray = Translator::gray();
    let t = translator.unwrap_or(&gray);
    data.iter()
        .map(|s| detector.detect(&t.translate(&s.ir)?, decode))
        .collect()
}

/// AP@50 on the IR planes of `data`; `None` means plain gray replication.
pub fn evaluate_pipeline(
    translator: Option<&Translator>,
    detector: &Detector,
    data: &Dataset,
    decode: &DecodeConfig,
) -> Result<f64> {
    let dets = predict(translator, detector, data, decode)?;
    let gts: Vec<Vec<BBox>> = data.iter().map(|s| s.boxes.clone()).collect();
    average_precision_at_50(&dets, &gts)
}

/// AP@50 on the RGB planes of `data`.
pub fn evaluate_rgb(detector: &Detector, data: &Dataset, decode: &DecodeConfig) -> Result<f64> {
    let dets = data
        .iter()
        .map(|s| detector.detect(&s.rgb, decode))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<Vec<BBox>> = data.iter().map(|s| s.boxes.clone()).collect();
    average_precision_at_50(&dets, &gts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneConfig};
    use crate::detector::STRIDE;

    fn tiny_det() -> DetectorConfig {
        DetectorConfig { width: 2, depth: 1, stride: STRIDE, num_classes: 2 }
    }

    fn tiny_data(n: usize) -> Dataset {
        let scene = SceneConfig { image_size: (40, 48), n_persons: (1, 2), seed: 3, ..SceneConfig::default() };
        generate_dataset(&scene, n, 1).unwrap().0
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig { epochs: 2, batch_size: 3, seed, ..TrainConfig::default() }
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let d = tiny_data(10);
        let cfg = quick(4);
        let (tr, va) = split_train_val(&d, &cfg).unwrap();
        assert_eq!((tr.len(), va.len()), (8, 2));
        assert!(tr.ids().iter().all(|i| !va.ids().contains(i)));
        assert_eq!(split_train_val(&d, &cfg).unwrap(), (tr.clone(), va));
        let (half, _) = split_train_val(&d, &TrainConfig { train_fraction: 0.5, ..cfg }).unwrap();
        assert_eq!(half.len(), 4);
        assert!(half.ids().iter().all(|i| tr.ids().contains(i)));
        assert!(matches!(split_train_val(&Dataset::default(), &quick(0)), Err(Error::EmptyDataset)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { batch_size: 0, ..quick(0) }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..quick(0) }.validate().is_err());
        assert!(TrainConfig { train_fraction: 0.0, ..quick(0) }.validate().is_err());
        assert!(quick(0).validate().is_ok());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let d = tiny_data(6);
        let (a, ra) = pretrain_rgb_detector(&d, &tiny_det(), &quick(1)).unwrap();
        let (b, rb) = pretrain_rgb_detector(&d, &tiny_det(), &quick(1)).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
        assert_eq!(ra.epochs, rb.epochs);
        assert_eq!(ra.epochs.len(), 2);
        assert!(ra.best_epoch >= 1);
        assert_ne!(ra.initial_digest, ra.final_digest);
    }

    #[test]
    fn zero_epoch_finetune_is_a_no_op() {
        let d = tiny_data(4);
        let det = Detector::new(tiny_det(), 2).unwrap();
        let cfg = TrainConfig { epochs: 0, ..quick(1) };
        let (ft, rep) = finetune_ir_detector(&det, &d, &cfg).unwrap();
        assert_eq!(ft.params.digest(), det.params.digest());
        assert_eq!(rep.best_epoch, 0);
        assert!(rep.epochs.is_empty());
    }

    #[test]
    fn hallucidet_keeps_detector_frozen() {
        let d = tiny_data(5);
        let det = Detector::new(tiny_det(), 3).unwrap();
        let before = det.params.digest();
        let net_cfg = HalluciNetConfig::new(vec![2, 2], true).unwrap();
        let (net, rep) = train_hallucidet(&det, &d, &net_cfg, &quick(2)).unwrap();
        assert_eq!(det.params.digest(), before);
        assert_eq!(rep.frozen_digest_before.as_deref(), Some(before.as_str()));
        assert_eq!(rep.frozen_digest_before, rep.frozen_digest_after);
        assert_ne!(net.params.digest(), rep.initial_digest);
        let (again, _) = train_hallucidet(&det, &d, &net_cfg, &quick(2)).unwrap();
        assert_eq!(net.params.digest(), again.params.digest());
    }

    #[test]
    fn reconstruction_training_reduces_l1() {
        let d = tiny_data(6);
        let net_cfg = HalluciNetConfig::new(vec![2, 2], false).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 2, learning_rate: 5e-3, ..quick(5) };
        let (a, rep) = train_reconstruction_translator(&d, &net_cfg, &cfg).unwrap();
        assert!(rep.epochs.last().unwrap().loss < rep.epochs[0].loss);
        let (b, _) = train_reconstruction_translator(&d, &net_cfg, &cfg).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
    }

    #[test]
    fn scaling_all_weights_scales_loss_and_sgd_step() {
        let d = tiny_data(2);
        let s = &d.samples[0];
        let det: ParamStore<f32> = tiny_det().init(4);
        let net_cfg = HalluciNetConfig::new(vec![2, 2], true).unwrap();
        let net: ParamStore<f32> = net_cfg.init(4);
        let x = ir_tensor::<f32>(&s.ir).unwrap();
        let w = LossWeights::new(0.3, 0.05, 0.7).unwrap();
        let run = |w: &LossWeights| {
            hallucination_sample_grad(&net_cfg, &net, &tiny_det(), &det, &x, &s.boxes, w, RegressionKind::L1)
                .unwrap()
        };
        let (l1, _, g1) = run(&w);
        let (l2, _, g2) = run(&w.scaled(2.0));
        assert_eq!(l2, 2.0 * l1);
        let sgd = OptimizerKind::Sgd { momentum: 0.0 };
        let d1 = Optimizer::new(sgd, 1e-2, &net).update(&g1);
        let d2 = Optimizer::new(sgd, 1e-2, &net).update(&g2);
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(&a.map(|v| 2.0 * v), b);
        }
        let (l3, _, _) = run(&w.scaled(0.37));
        assert!((l3 - 0.37 * l1).abs() <= 1e-12 * l1.abs());
    }

    #[test]
    fn evaluation_protocols() {
        let d = tiny_data(3);
        let det = Detector::new(tiny_det(), 6).unwrap();
        let decode = DecodeConfig::default();
        let gray = evaluate_pipeline(None, &det, &d, &decode).unwrap();
        let explicit = evaluate_pipeline(Some(&Translator::gray()), &det, &d, &decode).unwrap();
        assert_eq!(gray, explicit);
        let inv = Translator::Classic("invert".parse().unwrap());
        let ap = evaluate_pipeline(Some(&inv), &det, &d, &decode).unwrap();
        assert!((0.0..=1.0).contains(&ap));
        assert!((0.0..=1.0).contains(&evaluate_rgb(&det, &d, &decode).unwrap()));
    }
}
