//! Qualitative grids: one row per model chain, one column per sample.

use std::path::Path;

use hallucidet_core::classic::gray_to_3ch;
use hallucidet_core::detector::{DecodeConfig, Detector};
use hallucidet_core::image_io::quantize;
use hallucidet_core::train::Translator;
use hallucidet_core::{BBox, ImagePlane, PairedSample};
use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult};

pub const GT_COLOR: Rgb<u8> = Rgb([255, 220, 0]);
pub const PRED_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
const GAP: u32 = 2;
const GAP_COLOR: Rgb<u8> = Rgb([255, 255, 255]);

/// Detections below this score are not drawn.
pub const MIN_PANEL_SCORE: f64 = 0.3;

/// A panel row: the RGB plane with ground truth, or a translator feeding a
/// detector whose predictions are drawn on the translated image.
pub enum PanelRow<'a> {
    GroundTruth,
    Chain { translator: Translator, detector: &'a Detector },
}

pub struct Tile {
    pub image: ImagePlane,
    pub boxes: Vec<BBox>,
    pub color: Rgb<u8>,
}

fn to_rgb8(img: &ImagePlane) -> CliResult<RgbImage> {
    let three = if img.channels() == 1 { gray_to_3ch(img)? } else { img.clone() };
    let bytes: Vec<u8> = three.data().iter().map(|&v| quantize(v)).collect();
    RgbImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .ok_or_else(|| CliError::Config("tile buffer has the wrong size".into()))
}

/// 1-pixel outline, clipped to the canvas.
fn draw_box(canvas: &mut RgbImage, ox: u32, oy: u32, tw: u32, th: u32, b: &BBox, color: Rgb<u8>) {
    let clamp = |v: f64, hi: u32| (v.floor().max(0.0) as u32).min(hi - 1);
    let (x1, y1) = (clamp(b.x, tw), clamp(b.y, th));
    let (x2, y2) = (clamp(b.x2() - 1e-9, tw), clamp(b.y2() - 1e-9, th));
    for x in x1..=x2 {
        canvas.put_pixel(ox + x, oy + y1, color);
        canvas.put_pixel(ox + x, oy + y2, color);
    }
    for y in y1..=y2 {
        canvas.put_pixel(ox + x1, oy + y, color);
        canvas.put_pixel(ox + x2, oy + y, color);
    }
}

/// Lays tiles out row-major with a white gap. All tiles share one size.
pub fn compose_grid(rows: &[Vec<Tile>]) -> CliResult<RgbImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| CliError::Config("panel needs at least one tile".into()))?;
    let (tw, th) = (first.image.width() as u32, first.image.height() as u32);
    let cols = rows[0].len() as u32;
    if rows.iter().any(|r| r.len() as u32 != cols) {
        return Err(CliError::Config("panel rows have different lengths".into()));
    }
    let n_rows = rows.len() as u32;
    let mut canvas = RgbImage::from_pixel(
        cols * tw + (cols - 1) * GAP,
        n_rows * th + (n_rows - 1) * GAP,
        GAP_COLOR,
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.image.width() as u32 != tw || tile.image.height() as u32 != th {
                return Err(CliError::Config("panel tiles have different sizes".into()));
            }
            let (ox, oy) = (c as u32 * (tw + GAP), r as u32 * (th + GAP));
            image::imageops::replace(&mut canvas, &to_rgb8(&tile.image)?, ox as i64, oy as i64);
            for b in &tile.boxes {
                draw_box(&mut canvas, ox, oy, tw, th, b, tile.color);
            }
        }
    }
    Ok(canvas)
}

pub fn panel_tiles(
    samples: &[PairedSample],
    rows: &[PanelRow<'_>],
    decode: &DecodeConfig,
) -> CliResult<Vec<Vec<Tile>>> {
    if samples.is_empty() {
        return Err(CliError::Config("panel needs at least one sample".into()));
    }
    rows.iter()
        .map(|row| {
            samples
                .iter()
                .map(|s| match row {
                    PanelRow::GroundTruth => {
                        Ok(Tile { image: s.rgb.clone(), boxes: s.boxes.clone(), color: GT_COLOR })
                    }
                    PanelRow::Chain { translator, detector } => {
                        let image = translator.translate(&s.ir)?;
                        let boxes = detector
                            .detect(&image, decode)?
                            .into_iter()
                            .filter(|d| d.score >= MIN_PANEL_SCORE)
                            .map(|d| d.bbox)
                            .collect();
                        Ok(Tile { image, boxes, color: PRED_COLOR })
                    }
                })
                .collect()
        })
        .collect()
}

/// Renders the grid and writes it as PNG.
pub fn render_panel(
    samples: &[PairedSample],
    rows: &[PanelRow<'_>],
    decode: &DecodeConfig,
    out_path: &Path,
) -> CliResult<RgbImage> {
    let grid = compose_grid(&panel_tiles(samples, rows, decode)?)?;
    if let Some(dir) = out_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    grid.save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(grid)
}
