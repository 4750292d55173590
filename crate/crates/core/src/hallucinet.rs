//! IR -> 3-channel translation network: a small U-Net whose skip
//! connections pass through additive attention gates.
//!
//! Layout for `widths = [w0, .., wD]`:
//! `enc0.a`, `enc0.b` at full resolution, then per level `l` a stride-2
//! `down{l}` and `enc{l}`. The decoder walks back up with nearest
//! upsampling, a 1x1 `up{l}.proj`, the gate `att{l}` on the level `l - 1`
//! skip, and `dec{l}` over the concatenation. A 1x1 `out` conv and a
//! sigmoid produce the image.

use serde::{Deserialize, Serialize};

use crate::detector::check_layout;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv_bias, conv_bias_specs, conv_norm_act, conv_norm_specs, Bound};
use crate::params::{init_params, ParamSpec, ParamStore};
use crate::tensor::{Real, Tensor};
use crate::types::{ImagePlane, Modality};

/// Outputs are kept this far from 0 and 1 when leaving the graph, so the
/// open-interval contract survives f32 saturation.
const OUTPUT_MARGIN: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HalluciNetConfig {
    pub encoder_widths: Vec<usize>,
    pub depth: usize,
    pub use_attention: bool,
}

impl Default for HalluciNetConfig {
    fn default() -> Self {
        Self::preset("small").expect("known preset")
    }
}

impl HalluciNetConfig {
    pub const PRESETS: [&'static str; 4] = ["tiny", "small", "base", "large"];

    pub fn new(encoder_widths: Vec<usize>, use_attention: bool) -> Result<Self> {
        let cfg = Self {
            depth: encoder_widths.len().saturating_sub(1),
            encoder_widths,
            use_attention,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Width presets for the capacity sweep; all have depth 2.
    pub fn preset(name: &str) -> Result<Self> {
        let w = match name {
            "tiny" => vec![4, 8, 16],
            "small" => vec![6, 12, 24],
            "base" => vec![8, 16, 32],
            "large" => vec![12, 24, 48],
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown width preset {other:?} (expected one of {:?})",
                    Self::PRESETS
                )))
            }
        };
        Self::new(w, true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("hallucination net depth must be >= 1".into()));
        }
        if self.encoder_widths.len() != self.depth + 1 {
            return Err(Error::InvalidConfig(format!(
                "{} encoder widths for depth {} (need depth + 1)",
                self.encoder_widths.len(),
                self.depth
            )));
        }
        if self.encoder_widths.contains(&0) {
            return Err(Error::InvalidConfig("encoder widths must be positive".into()));
        }
        Ok(())
    }

    fn attention_inter(c: usize) -> usize {
        (c / 2).max(1)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let w = &self.encoder_widths;
        let mut s = Vec::new();
        s.extend(conv_norm_specs("enc0.a", 1, w[0], 3));
        s.extend(conv_norm_specs("enc0.b", w[0], w[0], 3));
        for l in 1..=self.depth {
            s.extend(conv_norm_specs(&format!("down{l}"), w[l - 1], w[l], 3));
            s.extend(conv_norm_specs(&format!("enc{l}"), w[l], w[l], 3));
        }
        for l in (1..=self.depth).rev() {
            let c = w[l - 1];
            s.extend(conv_bias_specs(&format!("up{l}.proj"), w[l], c, 1));
            if self.use_attention {
                let inter = Self::attention_inter(c);
                s.push(ParamSpec::weight(format!("att{l}.theta.w"), &[inter, c, 1, 1]));
                s.extend(conv_bias_specs(&format!("att{l}.phi"), c, inter, 1));
                s.extend(conv_bias_specs(&format!("att{l}.psi"), inter, 1, 1));
            }
            s.extend(conv_norm_specs(&format!("dec{l}"), 2 * c, c, 3));
        }
        s.extend(conv_bias_specs("out", w[0], 3, 1));
        s
    }

    pub fn init<T: Real>(&self, seed: u64) -> ParamStore<T> {
        init_params(&self.param_specs(), seed)
    }

    pub fn descriptor(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "hallucinet", "config": self })
    }

    pub fn from_descriptor(v: &serde_json::Value) -> Result<Self> {
        if v.get("kind").and_then(|k| k.as_str()) != Some("hallucinet") {
            return Err(Error::Checkpoint("not a hallucination-network checkpoint".into()));
        }
        let cfg: Self = serde_json::from_value(v["config"].clone())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Learnable parameter count of the architecture.
pub fn count_params(cfg: &HalluciNetConfig) -> usize {
    cfg.param_specs().iter().map(ParamSpec::numel).sum()
}

/// Additive attention: `skip * sigmoid(psi(silu(theta(skip) + phi(gate))))`.
pub fn attention_gate<T: Real>(
    g: &mut Graph<T>,
    p: &Bound<'_, T>,
    prefix: &str,
    skip: Var,
    gate: Var,
) -> Result<Var> {
    let (cs, hs, ws) = g.value(skip).chw();
    let (cg, hg, wg) = g.value(gate).chw();
    if (hs, ws) != (hg, wg) || cs != cg {
        return Err(Error::ShapeMismatch(format!(
            "attention skip [{cs}, {hs}, {ws}] vs gate [{cg}, {hg}, {wg}]"
        )));
    }
    let theta = g.conv2d(skip, p.var(&format!("{prefix}.theta.w")), None, 1, 0);
    let phi = conv_bias(g, p, &format!("{prefix}.phi"), gate);
    let sum = g.add(theta, phi);
    let act = g.silu(sum);
    let logits = conv_bias(g, p, &format!("{prefix}.psi"), act);
    let mask = g.sigmoid(logits);
    Ok(g.mul_mask(skip, mask))
}

/// Handles returned by [`forward_graph`].
#[derive(Debug, Clone, Copy)]
pub struct HallucinationVars {
    /// Pre-sigmoid output, cropped to the input size.
    pub logits: Var,
    /// `[3, H, W]` image in (0, 1).
    pub image: Var,
}

/// Builds the network on `input: [1, H, W]`.
pub fn forward_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &HalluciNetConfig,
    p: &Bound<'_, T>,
    input: Var,
) -> HallucinationVars {
    let (c, h, w) = g.value(input).chw();
    assert_eq!(c, 1, "hallucination net consumes one channel");
    let m = 1usize << cfg.depth;
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let x = if (hp, wp) != (h, w) {
        g.pad_bottom_right(input, hp, wp)
    } else {
        input
    };

    let mut skips = Vec::with_capacity(cfg.depth + 1);
    let mut x = conv_norm_act(g, p, "enc0.a", x, 1);
    x = conv_norm_act(g, p, "enc0.b", x, 1);
    skips.push(x);
    for l in 1..=cfg.depth {
        x = conv_norm_act(g, p, &format!("down{l}"), x, 2);
        x = conv_norm_act(g, p, &format!("enc{l}"), x, 1);
        skips.push(x);
    }
    for l in (1..=cfg.depth).rev() {
        let up = g.upsample2(x);
        let gate = conv_bias(g, p, &format!("up{l}.proj"), up);
        let skip = skips[l - 1];
        let skip = if cfg.use_attention {
            attention_gate(g, p, &format!("att{l}"), skip, gate).expect("decoder shapes agree")
        } else {
            skip
        };
        let cat = g.concat(gate, skip);
        x = conv_norm_act(g, p, &format!("dec{l}"), cat, 1);
    }
    let logits = conv_bias(g, p, "out", x);
    let logits = if (hp, wp) != (h, w) { g.crop(logits, h, w) } else { logits };
    let image = g.sigmoid(logits);
    HallucinationVars { logits, image }
}

pub fn ir_tensor<T: Real>(img: &ImagePlane) -> Result<Tensor<T>> {
    img.require_channels(1)?;
    Ok(Tensor::from_f64(&[1, img.height(), img.width()], img.data()))
}

/// Converts the network output into an image in the open unit interval.
pub fn output_plane<T: Real>(image: &Tensor<T>) -> ImagePlane {
    let (c, h, w) = image.chw();
    debug_assert_eq!(c, 3);
    let planar: Vec<f64> = image
        .data()
        .iter()
        .map(|v| v.f64().clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN))
        .collect();
    ImagePlane::from_planar(h, w, &planar, Modality::Hallucinated).expect("values in range")
}

pub fn hallucinate<T: Real>(
    cfg: &HalluciNetConfig,
    params: &ParamStore<T>,
    img: &ImagePlane,
) -> Result<ImagePlane> {
    let x = ir_tensor(img)?;
    let mut g = Graph::new();
    let p = Bound::new(&mut g, params, false);
    let xv = g.leaf(x, false);
    let out = forward_graph(&mut g, cfg, &p, xv);
    Ok(output_plane(g.value(out.image)))
}

/// Mean absolute error over all pixels and channels.
pub fn reconstruction_loss(pred: &ImagePlane, target: &ImagePlane) -> Result<f64> {
    if (pred.height(), pred.width(), pred.channels())
        != (target.height(), target.width(), target.channels())
    {
        return Err(Error::ShapeMismatch(format!(
            "pred {}x{}x{} vs target {}x{}x{}",
            pred.height(),
            pred.width(),
            pred.channels(),
            target.height(),
            target.width(),
            target.channels()
        )));
    }
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n)
}

/// L1 loss and its gradient for a planar prediction against a planar target.
pub fn l1_with_grad<T: Real>(pred: &Tensor<T>, target: &[f64]) -> (f64, Tensor<T>) {
    assert_eq!(pred.len(), target.len());
    let inv = 1.0 / pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p.f64() - t;
            loss += d.abs();
            T::of(inv * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 })
        })
        .collect();
    (loss * inv, Tensor::from_vec(pred.shape(), grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HalluciNet {
    pub config: HalluciNetConfig,
    pub params: ParamStore<f32>,
}

impl HalluciNet {
    pub fn new(config: HalluciNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = config.init(seed);
        Ok(Self { config, params })
    }

    pub fn hallucinate(&self, img: &ImagePlane) -> Result<ImagePlane> {
        hallucinate(&self.config, &self.params, img)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path, &self.config.descriptor())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (params, desc) = ParamStore::<f32>::load(path)?;
        let config = HalluciNetConfig::from_descriptor(&desc)?;
        check_layout(&params, &config.param_specs())?;
        Ok(Self { config, params })
    }
}
