//! Procedural paired IR / RGB scenes and the on-disk dataset layout.
//!
//! RGB: light, lightly textured background; persons are darker ellipses of
//! a random saturated hue; distractors are faint gray horizontal blobs.
//! IR: dark noisy background where persons and distractors glow with the
//! same intensity distribution. Only persons carry boxes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::{
    dequantize, load_png, quantize, read_annotations, save_png, write_annotations, AnnotationRecord,
};
use crate::metrics::iou;
use crate::rng::{derive_rng, streams, StreamRng};
use crate::types::{BBox, Dataset, ImagePlane, Modality, PairedSample};

pub const PERSON_CLASS: u32 = 1;
/// First sample id of generated test splits; train ids start at 0.
pub const TEST_ID_OFFSET: u64 = 1 << 32;
const MAX_PLACEMENT_TRIES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    /// Inclusive range.
    pub n_persons: (usize, usize),
    /// Inclusive range.
    pub n_distractors: (usize, usize),
    pub light_level: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: (96, 128),
            n_persons: (1, 3),
            n_distractors: (1, 2),
            light_level: 0.35,
            noise_sigma: 0.03,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 40 || w < 40 {
            return Err(Error::InvalidConfig(format!("image size {h}x{w} below 40x40")));
        }
        if h % crate::detector::STRIDE != 0 || w % crate::detector::STRIDE != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {h}x{w} is not a multiple of the detector stride"
            )));
        }
        for (name, (lo, hi)) in [("n_persons", self.n_persons), ("n_distractors", self.n_distractors)] {
            if lo > hi {
                return Err(Error::InvalidConfig(format!("{name} range {lo}..={hi} is empty")));
            }
        }
        if !(0.0..=1.0).contains(&self.light_level) {
            return Err(Error::InvalidConfig(format!("light_level {} outside [0, 1]", self.light_level)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_sigma {} invalid", self.noise_sigma)));
        }
        Ok(())
    }

    /// Brightness multiplier applied to the RGB plane.
    pub fn rgb_gain(&self) -> f64 {
        0.25 + 0.75 * self.light_level
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    /// Semi-axes.
    ax: f64,
    ay: f64,
    ir_level: f64,
    rgb: [f64; 3],
}

impl Blob {
    fn bbox(&self, cls: u32) -> BBox {
        BBox::new(cls, self.cx - self.ax, self.cy - self.ay, 2.0 * self.ax, 2.0 * self.ay)
            .expect("positive axes")
    }

    /// Fractional coverage with a one-pixel soft edge.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.ax;
        let dy = (y - self.cy) / self.ay;
        let r = (dx * dx + dy * dy).sqrt();
        let edge = 1.0 / self.ax.min(self.ay);
        ((1.0 - r) / edge + 0.5).clamp(0.0, 1.0)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Sum of a few random low-frequency gratings, amplitude roughly `amp`.
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut StreamRng, n: usize, amp: f64) -> Self {
        let waves = (0..n)
            .map(|_| {
                let angle = rng.random_range(0.0..PI);
                let freq = rng.random_range(0.02..0.12);
                (
                    freq * angle.cos(),
                    freq * angle.sin(),
                    rng.random_range(0.0..2.0 * PI),
                    amp / n as f64 * rng.random_range(0.5..1.5),
                )
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|(fx, fy, ph, a)| a * (2.0 * PI * (fx * x + fy * y) + ph).sin())
            .sum()
    }
}

fn place(
    rng: &mut StreamRng,
    placed: &mut Vec<BBox>,
    (h, w): (usize, usize),
    size: impl Fn(&mut StreamRng) -> (f64, f64),
) -> Option<(f64, f64, f64, f64)> {
    for _ in 0..MAX_PLACEMENT_TRIES {
        let (ax, ay) = size(rng);
        if 2.0 * ax + 2.0 >= w as f64 || 2.0 * ay + 2.0 >= h as f64 {
            continue;
        }
        let cx = rng.random_range(ax + 1.0..w as f64 - ax - 1.0);
        let cy = rng.random_range(ay + 1.0..h as f64 - ay - 1.0);
        let b = BBox::new(0, cx - ax, cy - ay, 2.0 * ax, 2.0 * ay).ok()?;
        if placed.iter().all(|p| iou(p, &b) < 0.05) {
            placed.push(b);
            return Some((cx, cy, ax, ay));
        }
    }
    None
}

fn quantized(v: f64) -> f64 {
    dequantize(quantize(v))
}

/// One scene, fully determined by `(cfg.seed, sample_id)`. Intensities are
/// 8-bit levels so that PNG export reloads bit-exactly.
pub fn generate_sample(cfg: &SceneConfig, sample_id: u64) -> Result<PairedSample> {
    cfg.validate()?;
    let (h, w) = cfg.image_size;
    let mut rng = derive_rng(cfg.seed, streams::SAMPLE_BASE.wrapping_add(sample_id));

    let n_persons = rng.random_range(cfg.n_persons.0..=cfg.n_persons.1);
    let n_distr = rng.random_range(cfg.n_distractors.0..=cfg.n_distractors.1);
    let mut placed = Vec::new();
    let mut persons = Vec::new();
    let mut distractors = Vec::new();

    let bg_hue = rng.random_range(0.0..1.0);
    let bg = hsv_to_rgb(bg_hue, rng.random_range(0.05..0.2), rng.random_range(0.75..0.92));
    let rgb_tex = Texture::new(&mut rng, 3, 0.08);
    let ir_bg = rng.random_range(0.1..0.2);
    let ir_tex = Texture::new(&mut rng, 2, 0.04);

    for _ in 0..n_persons {
        let pos = place(&mut rng, &mut placed, (h, w), |r| {
            let ay = r.random_range(8.0..18.0);
            (ay * r.random_range(0.35..0.5), ay)
        });
        if let Some((cx, cy, ax, ay)) = pos {
            let color = hsv_to_rgb(
                rng.random_range(0.0..1.0),
                rng.random_range(0.65..1.0),
                rng.random_range(0.3..0.55),
            );
            persons.push(Blob { cx, cy, ax, ay, ir_level: rng.random_range(0.7..0.95), rgb: color });
        }
    }
    for _ in 0..n_distr {
        let pos = place(&mut rng, &mut placed, (h, w), |r| {
            let ay = r.random_range(4.0..8.0);
            (ay * r.random_range(1.5..3.0), ay)
        });
        if let Some((cx, cy, ax, ay)) = pos {
            let shade = rng.random_range(0.85..0.95);
            let gray = (bg[0] + bg[1] + bg[2]) / 3.0 * shade;
            distractors.push(Blob { cx, cy, ax, ay, ir_level: rng.random_range(0.7..0.95), rgb: [gray; 3] });
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(1e-12)).expect("finite sigma");
    let rgb_noise = Normal::new(0.0, 0.015).expect("finite sigma");
    let gain = cfg.rgb_gain();
    let mut ir = Vec::with_capacity(h * w);
    let mut rgb = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = rgb_tex.at(fx, fy);
            let mut px = [bg[0] + t, bg[1] + t, bg[2] + t];
            let mut v = ir_bg + ir_tex.at(fx, fy);
            for b in distractors.iter().chain(&persons) {
                let a = b.coverage(fx, fy);
                if a > 0.0 {
                    // Slight vertical falloff keeps blobs from being flat discs.
                    let heat = b.ir_level * (1.0 - 0.15 * ((fy - b.cy) / b.ay).abs());
                    v = v * (1.0 - a) + heat * a;
                    for c in 0..3 {
                        px[c] = px[c] * (1.0 - a) + b.rgb[c] * a;
                    }
                }
            }
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ir.push(quantized((v + n).clamp(0.0, 1.0)));
            for p in px {
                rgb.push(quantized(((p + rgb_noise.sample(&mut rng)) * gain).clamp(0.0, 1.0)));
            }
        }
    }
    let boxes = persons.iter().map(|p| p.bbox(PERSON_CLASS)).collect();
    PairedSample::new(
        ImagePlane::new(h, w, 1, ir, Modality::Ir)?,
        ImagePlane::new(h, w, 3, rgb, Modality::Rgb)?,
        boxes,
        sample_id,
        cfg.seed,
    )
}

pub fn generate_split(cfg: &SceneConfig, ids: impl IntoIterator<Item = u64>) -> Result<Dataset> {
    Ok(Dataset::new(
        ids.into_iter()
            .map(|id| generate_sample(cfg, id))
            .collect::<Result<_>>()?,
    ))
}

/// Train ids are `0..n_train`, test ids `TEST_ID_OFFSET..`, so the test
/// split is the same for any train size.
pub fn generate_dataset(cfg: &SceneConfig, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidConfig("n_train and n_test must be positive".into()));
    }
    let train = generate_split(cfg, 0..n_train as u64)?;
    let test = generate_split(cfg, (0..n_test as u64).map(|i| TEST_ID_OFFSET + i))?;
    Ok((train, test))
}

/// Number of samples kept for `fraction` of `n`: `ceil(fraction * n)`,
/// ignoring float noise below 1e-9 (so 0.3 of 100 is 30).
pub fn fraction_count(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::BadFraction(fraction));
    }
    Ok(((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n))
}

/// A fixed seeded permutation is cut at `ceil(fraction * N)`, so subsets of
/// the same seed are nested. Kept samples retain their original order.
pub fn subset_fraction(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    let k = fraction_count(fraction, data.len())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut derive_rng(seed, streams::SUBSET));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(Dataset::new(keep.into_iter().map(|i| data.samples[i].clone()).collect()))
}

pub fn ir_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join(format!("{id}_ir.png"))
}

pub fn rgb_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join(format!("{id}_rgb.png"))
}

/// Reads a JSON-lines annotation file and the `{id}_ir.png` /
/// `{id}_rgb.png` pairs it references. Samples come out sorted by id.
pub fn load_external(annotations_path: &Path, images_dir: &Path) -> Result<Dataset> {
    let records = read_annotations(annotations_path)?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut by_id: BTreeMap<u64, Vec<BBox>> = BTreeMap::new();
    for r in &records {
        by_id.entry(r.sample_id).or_default().push(r.bbox()?);
    }
    let mut samples = Vec::with_capacity(by_id.len());
    for (id, boxes) in by_id {
        let (ip, rp) = (ir_path(images_dir, id), rgb_path(images_dir, id));
        for p in [&ip, &rp] {
            if !p.is_file() {
                return Err(Error::MissingPair { id, path: p.clone() });
            }
        }
        let ir = load_png(&ip, Modality::Rgb)?;
        let rgb = load_png(&rp, Modality::Rgb)?;
        if ir.channels() != 1 {
            return Err(Error::WrongChannelCount { expected: 1, actual: ir.channels() });
        }
        if rgb.channels() != 3 {
            return Err(Error::WrongChannelCount { expected: 3, actual: rgb.channels() });
        }
        samples.push(PairedSample::new(ir, rgb, boxes, id, 0)?);
    }
    Ok(Dataset::new(samples))
}

/// Writes the layout read by [`load_external`]. Samples without boxes have
/// no annotation line and therefore do not survive a reload.
pub fn export(data: &Dataset, dir: &Path, annotations_name: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut recs = Vec::new();
    for s in data.iter() {
        save_png(&s.ir, &ir_path(dir, s.sample_id))?;
        save_png(&s.rgb, &rgb_path(dir, s.sample_id))?;
        recs.extend(s.boxes.iter().map(|b| AnnotationRecord::from_box(s.sample_id, b)));
    }
    write_annotations(&recs, &dir.join(annotations_name))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> SceneConfig {
        SceneConfig { seed: 11, ..SceneConfig::default() }
    }

    #[test]
    fn samples_are_deterministic() {
        let a = generate_sample(&cfg(), 5).unwrap();
        assert_eq!(a, generate_sample(&cfg(), 5).unwrap());
        assert_ne!(a, generate_sample(&cfg(), 6).unwrap());
        assert_ne!(a, generate_sample(&SceneConfig { seed: 12, ..cfg() }, 5).unwrap());
    }

    #[test]
    fn fixed_person_count() {
        let c = SceneConfig { n_persons: (2, 2), ..cfg() };
        for id in 0..20 {
            assert_eq!(generate_sample(&c, id).unwrap().boxes.len(), 2);
        }
    }

    #[test]
    fn distractors_glow_without_boxes() {
        let c = SceneConfig { n_persons: (0, 0), n_distractors: (1, 1), noise_sigma: 0.0, ..cfg() };
        for id in 0..5 {
            let s = generate_sample(&c, id).unwrap();
            assert!(s.boxes.is_empty());
            let hot = s.ir.data().iter().filter(|v| **v > 0.5).count();
            assert!(hot > 20, "sample {id}: {hot} bright pixels");
        }
    }

    #[test]
    fn persons_are_bright_in_ir_and_darker_in_rgb() {
        let s = generate_sample(&SceneConfig { noise_sigma: 0.0, ..cfg() }, 3).unwrap();
        let b = s.boxes[0];
        let (cx, cy) = b.center();
        let (x, y) = (cx as usize, cy as usize);
        assert!(s.ir.get(y, x, 0) > 0.5);
        assert!(s.ir.get(1, 1, 0) < 0.35 || s.boxes.iter().any(|bb| bb.x < 2.0 && bb.y < 2.0));
        let luma = |yy: usize, xx: usize| (0..3).map(|c| s.rgb.get(yy, xx, c)).sum::<f64>();
        let corner_is_bg = !s.boxes.iter().any(|bb| bb.x < 2.0 && bb.y < 2.0);
        if corner_is_bg {
            assert!(luma(y, x) < luma(1, 1));
        }
    }

    #[test]
    fn boxes_inside_canvas_and_planes_in_range() {
        let c = cfg();
        for id in 0..30 {
            let s = generate_sample(&c, id).unwrap();
            for b in &s.boxes {
                assert!(b.x >= 0.0 && b.y >= 0.0 && b.x2() <= 128.0 && b.y2() <= 96.0);
                let aspect = b.w / b.h;
                assert!((0.35..=0.5).contains(&aspect));
            }
            assert!(s.ir.data().iter().chain(s.rgb.data()).all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_splits() {
        let (tr, te) = generate_dataset(&cfg(), 6, 3).unwrap();
        assert_eq!((tr.len(), te.len()), (6, 3));
        assert!(tr.ids().iter().all(|i| !te.ids().contains(i)));
        let (_, te2) = generate_dataset(&cfg(), 2, 3).unwrap();
        assert_eq!(te, te2);
        assert!(generate_dataset(&cfg(), 0, 3).is_err());
    }

    #[test]
    fn subset_examples() {
        let (d, _) = generate_dataset(&SceneConfig { image_size: (40, 40), ..cfg() }, 100, 1).unwrap();
        assert_eq!(subset_fraction(&d, 1.0, 3).unwrap(), d);
        assert_eq!(subset_fraction(&d, 0.3, 3).unwrap().len(), 30);
        assert_eq!(subset_fraction(&d, 0.001, 3).unwrap().len(), 1);
        assert!(matches!(subset_fraction(&d, 0.0, 3), Err(Error::BadFraction(_))));
        assert!(matches!(subset_fraction(&d, 1.5, 3), Err(Error::BadFraction(_))));
    }

    proptest! {
        #[test]
        fn subsets_are_nested(n in 1usize..200, a in 0.01..1.0f64, b in 0.01..1.0f64, seed in any::<u64>()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ids: Vec<usize> = (0..n).collect();
            let mut order = ids.clone();
            order.shuffle(&mut derive_rng(seed, streams::SUBSET));
            let kl = fraction_count(lo, n).unwrap();
            let kh = fraction_count(hi, n).unwrap();
            prop_assert!(kl <= kh);
            prop_assert!(kl >= 1);
            prop_assert_eq!(kh, ((hi * n as f64) - 1e-9).ceil() as usize);
            let small: std::collections::BTreeSet<_> = order[..kl].iter().collect();
            let big: std::collections::BTreeSet<_> = order[..kh].iter().collect();
            prop_assert!(small.is_subset(&big));
        }
    }

    #[test]
    fn export_then_load_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let c = SceneConfig { n_persons: (1, 2), ..cfg() };
        let (d, _) = generate_dataset(&c, 3, 1).unwrap();
        export(&d, dir.path(), "ann.jsonl").unwrap();
        let back = load_external(&dir.path().join("ann.jsonl"), dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in d.iter().zip(back.iter()) {
            assert_eq!(a.ir, b.ir);
            assert_eq!(a.rgb, b.rgb);
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.sample_id, b.sample_id);
        }
    }

    #[test]
    fn external_loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("ann.jsonl");
        std::fs::write(&ann, "").unwrap();
        assert!(matches!(load_external(&ann, dir.path()), Err(Error::EmptyDataset)));

        let s = generate_sample(&cfg(), 7).unwrap();
        save_png(&s.ir, &ir_path(dir.path(), 7)).unwrap();
        write_annotations(&[AnnotationRecord::from_box(7, &s.boxes[0])], &ann).unwrap();
        match load_external(&ann, dir.path()) {
            Err(Error::MissingPair { id, path }) => {
                assert_eq!(id, 7);
                assert!(path.ends_with("7_rgb.png"));
            }
            other => panic!("unexpected {other:?}"),
        }
        save_png(&s.rgb, &rgb_path(dir.path(), 7)).unwrap();
        let d = load_external(&ann, dir.path()).unwrap();
        assert_eq!(d.len(), 1);
    }
}
