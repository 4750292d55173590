//! PNG planes and JSON-lines annotations.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BBox, ImagePlane, Modality};

/// 8-bit quantization: `round(v * 255)`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(q: u8) -> f64 {
    q as f64 / 255.0
}

pub fn to_bytes(img: &ImagePlane) -> Vec<u8> {
    img.data().iter().map(|&v| quantize(v)).collect()
}

pub fn save_png(img: &ImagePlane, path: &Path) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = to_bytes(img);
    match img.channels() {
        1 => GrayImage::from_raw(w, h, bytes)
            .expect("buffer size")
            .save(path)?,
        _ => RgbImage::from_raw(w, h, bytes)
            .expect("buffer size")
            .save(path)?,
    }
    Ok(())
}

/// Loads an 8-bit PNG. Gray files become IR planes, color files take the
/// given 3-channel modality.
pub fn load_png(path: &Path, color_modality: Modality) -> Result<ImagePlane> {
    let img = image::open(path)?;
    let (h, w) = (img.height() as usize, img.width() as usize);
    match img.color().channel_count() {
        1 | 2 => {
            let g = img.into_luma8();
            let data = g.into_raw().into_iter().map(dequantize).collect();
            ImagePlane::new(h, w, 1, data, Modality::Ir)
        }
        _ => {
            let rgb = img.into_rgb8();
            let data = rgb.into_raw().into_iter().map(dequantize).collect();
            ImagePlane::new(h, w, 3, data, color_modality)
        }
    }
}

/// One line of an annotation file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: u64,
    pub cls: u32,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl AnnotationRecord {
    pub fn from_box(sample_id: u64, b: &BBox) -> Self {
        Self {
            sample_id,
            cls: b.cls,
            x: b.x,
            y: b.y,
            w: b.w,
            h: b.h,
        }
    }

    pub fn bbox(&self) -> Result<BBox> {
        BBox::new(self.cls, self.x, self.y, self.w, self.h)
    }
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads JSON-lines annotations; blank lines are skipped, anything else
/// that fails to parse or validate is reported with its 1-based line.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedAnnotation {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        rec.bbox().map_err(|e| malformed(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}
