//! Domain types shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sensor modality carried by an [`ImagePlane`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ir,
    Rgb,
    Hallucinated,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Ir => 1,
            Modality::Rgb | Modality::Hallucinated => 3,
        }
    }
}

/// Intensities are snapped to multiples of this step, which makes
/// `1 - v` exact and inversion a bit-exact involution.
pub const INTENSITY_STEP: f64 = 1.0 / (1u64 << 53) as f64;

pub fn snap_intensity(v: f64) -> f64 {
    (v * (1u64 << 53) as f64).round() * INTENSITY_STEP
}

/// An `height x width x channels` image with unit-interval intensities,
/// stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
    modality: Modality,
}

impl ImagePlane {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
        modality: Modality,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty canvas {height}x{width}")));
        }
        if channels != modality.channels() {
            return Err(Error::WrongChannelCount {
                expected: modality.channels(),
                actual: channels,
            });
        }
        if data.len() != height * width * channels {
            return Err(Error::InvalidImage(format!(
                "{} values for a {height}x{width}x{channels} plane",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        for v in &mut data {
            *v = snap_intensity(*v);
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
            modality,
        })
    }

    /// Builds a plane from values already known to be valid; out-of-range
    /// values are clamped into [0, 1].
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f64>,
        modality: Modality,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data, modality)
    }

    pub fn filled(height: usize, width: usize, modality: Modality, value: f64) -> Result<Self> {
        let c = modality.channels();
        Self::new(height, width, c, vec![value; height * width * c], modality)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// One channel as a contiguous row-major buffer.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// Planar (channel-major) copy of the data, the layout the networks use.
    pub fn to_planar(&self) -> Vec<f64> {
        (0..self.channels).flat_map(|c| self.channel(c)).collect()
    }

    /// Inverse of [`ImagePlane::to_planar`]; values are clamped into [0, 1].
    pub fn from_planar(
        height: usize,
        width: usize,
        planar: &[f64],
        modality: Modality,
    ) -> Result<Self> {
        let channels = modality.channels();
        let hw = height * width;
        if planar.len() != hw * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} planar values for {height}x{width}x{channels}",
                planar.len()
            )));
        }
        let mut data = vec![0.0; planar.len()];
        for c in 0..channels {
            for i in 0..hw {
                data[i * channels + c] = planar[c * hw + i];
            }
        }
        Self::from_clamped(height, width, channels, data, modality)
    }

    pub fn with_modality(self, modality: Modality) -> Result<Self> {
        Self::new(self.height, self.width, self.channels, self.data, modality)
    }

    pub(crate) fn require_channels(&self, expected: usize) -> Result<()> {
        if self.channels != expected {
            return Err(Error::WrongChannelCount {
                expected,
                actual: self.channels,
            });
        }
        Ok(())
    }
}

/// Axis-aligned box in top-left + size form: `(cls, x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cls: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cls: u32, x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cls, x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        bbox_area(self)
    }

    pub fn intersects_canvas(&self, height: usize, width: usize) -> bool {
        self.x < width as f64 && self.y < height as f64 && self.x2() > 0.0 && self.y2() > 0.0
    }

    /// Box from corner coordinates; `None` when degenerate.
    pub fn from_corners(cls: u32, x1: f64, y1: f64, x2: f64, y2: f64) -> Option<Self> {
        let b = Self {
            cls,
            x: x1,
            y: y1,
            w: x2 - x1,
            h: y2 - y1,
        };
        b.validate().ok().map(|_| b)
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing is left.
    pub fn clip(&self, height: usize, width: usize) -> Option<Self> {
        let x1 = self.x.clamp(0.0, width as f64);
        let y1 = self.y.clamp(0.0, height as f64);
        let x2 = self.x2().clamp(0.0, width as f64);
        let y2 = self.y2().clamp(0.0, height as f64);
        Self::from_corners(self.cls, x1, y1, x2, y2)
    }
}

pub fn bbox_area(b: &BBox) -> f64 {
    b.w * b.h
}

/// A scored predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Predictions for one image. Ordering is by descending score with ties in
/// insertion order (see [`sort_detections`]).
pub type DetectionSet = Vec<Detection>;

/// Stable sort by descending score; equal scores keep insertion order.
pub fn sort_detections(dets: &mut DetectionSet) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Pixel-aligned IR / RGB pair sharing one box list.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub ir: ImagePlane,
    pub rgb: ImagePlane,
    pub boxes: Vec<BBox>,
    pub sample_id: u64,
    pub seed: u64,
}

impl PairedSample {
    pub fn new(
        ir: ImagePlane,
        rgb: ImagePlane,
        boxes: Vec<BBox>,
        sample_id: u64,
        seed: u64,
    ) -> Result<Self> {
        ir.require_channels(1)?;
        rgb.require_channels(3)?;
        if ir.height() != rgb.height() || ir.width() != rgb.width() {
            return Err(Error::ShapeMismatch(format!(
                "sample {sample_id}: ir {}x{} vs rgb {}x{}",
                ir.height(),
                ir.width(),
                rgb.height(),
                rgb.width()
            )));
        }
        for b in &boxes {
            b.validate()?;
            if !b.intersects_canvas(ir.height(), ir.width()) {
                return Err(Error::InvalidBox(format!("{b:?} outside canvas")));
            }
        }
        Ok(Self {
            ir,
            rgb,
            boxes,
            sample_id,
            seed,
        })
    }

    pub fn height(&self) -> usize {
        self.ir.height()
    }

    pub fn width(&self) -> usize {
        self.ir.width()
    }
}

/// Ordered collection of paired samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn new(samples: Vec<PairedSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.samples.iter().map(|s| s.sample_id).collect()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, PairedSample> {
        self.samples.iter()
    }
}

/// Multipliers of the classification, regression and auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_reg: f64,
    pub lambda_star: f64,
}

impl LossWeights {
    pub fn new(lambda_cls: f64, lambda_reg: f64, lambda_star: f64) -> Result<Self> {
        let w = Self {
            lambda_cls,
            lambda_reg,
            lambda_star,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_reg, self.lambda_star];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidLossWeights(format!(
                "weights must be finite and >= 0: {self:?}"
            )));
        }
        if all.iter().all(|v| *v == 0.0) {
            return Err(Error::InvalidLossWeights("all weights are zero".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            lambda_cls: self.lambda_cls * k,
            lambda_reg: self.lambda_reg * k,
            lambda_star: self.lambda_star * k,
        }
    }

    /// Stable row key, e.g. `cls=0.01;reg=0.1;star=0.1`.
    pub fn key(&self) -> String {
        format!(
            "cls={};reg={};star={}",
            self.lambda_cls, self.lambda_reg, self.lambda_star
        )
    }
}

impl Default for LossWeights {
    /// Best anchor-free row of the weight ablation grid.
    fn default() -> Self {
        Self {
            lambda_cls: 0.01,
            lambda_reg: 0.1,
            lambda_star: 0.1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapped_intensities_invert_exactly() {
        let mut v = 1e-300;
        while v < 1.0 {
            for x in [v, 1.0 - v, 0.1 * v, 1.0 / 3.0 * v] {
                let s = snap_intensity(x);
                assert_eq!(snap_intensity(s), s);
                assert_eq!(1.0 - (1.0 - s), s);
                assert_eq!(snap_intensity(1.0 - s), 1.0 - s);
            }
            v *= 1.37;
        }
    }

    #[test]
    fn area_examples() {
        let b = |x, y, w, h| BBox::new(1, x, y, w, h).unwrap();
        assert_eq!(bbox_area(&b(0.0, 0.0, 2.0, 2.0)), 4.0);
        assert_eq!(bbox_area(&b(5.0, 7.0, 1.0, 3.0)), 3.0);
        assert_eq!(bbox_area(&b(0.0, 0.0, 0.5, 0.5)), 0.25);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(1, 0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(1, 0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(1, f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn image_plane_validation() {
        assert!(ImagePlane::new(1, 1, 1, vec![1.5], Modality::Ir).is_err());
        assert!(ImagePlane::new(1, 1, 3, vec![0.0; 3], Modality::Ir).is_err());
        assert!(ImagePlane::new(1, 2, 1, vec![0.0], Modality::Ir).is_err());
        let p = ImagePlane::new(1, 2, 3, vec![0.125, 0.25, 0.375, 0.5, 0.625, 0.75], Modality::Rgb).unwrap();
        assert_eq!(p.channel(1), vec![0.25, 0.625]);
        assert_eq!(p.to_planar(), vec![0.125, 0.5, 0.25, 0.625, 0.375, 0.75]);
        let back = ImagePlane::from_planar(1, 2, &p.to_planar(), Modality::Rgb).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn loss_weights_invariants() {
        assert!(LossWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0, 0.0).is_err());
        assert!(LossWeights::new(f64::INFINITY, 1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, 1.0, 0.0).is_ok());
        LossWeights::default().validate().unwrap();
    }

    #[test]
    fn sort_is_stable_on_ties() {
        let b = BBox::new(1, 0.0, 0.0, 1.0, 1.0).unwrap();
        let mut dets: DetectionSet = [0.5, 0.9, 0.5, 0.7]
            .iter()
            .enumerate()
            .map(|(i, &s)| Detection {
                bbox: BBox { x: i as f64, ..b },
                score: s,
            })
            .collect();
        sort_detections(&mut dets);
        let xs: Vec<f64> = dets.iter().map(|d| d.bbox.x).collect();
        assert_eq!(xs, vec![1.0, 3.0, 0.0, 2.0]);
    }
}
