//! Fixtures shared by the benchmarks.

use hallucidet_core::data::{generate_split, SceneConfig};
use hallucidet_core::detector::{DecodeConfig, Detector, DetectorConfig};
use hallucidet_core::train::predict;
use hallucidet_core::{BBox, Dataset, DetectionSet};

pub fn scene() -> SceneConfig {
    SceneConfig::default()
}

pub fn samples(n: usize) -> Dataset {
    generate_split(&scene(), 0..n as u64).expect("default scene is valid")
}

pub fn detector(width: usize) -> DetectorConfig {
    DetectorConfig { width, ..DetectorConfig::default() }
}

/// Predictions of an untrained detector with a permissive threshold, so
/// the AP benchmark sees many detections per image.
pub fn ap_problem(n: usize) -> (Vec<DetectionSet>, Vec<Vec<BBox>>) {
    let data = samples(n);
    let det = Detector::new(detector(4), 0).expect("valid detector");
    let decode = DecodeConfig { score_thresh: 0.0, ..DecodeConfig::default() };
    let dets = predict(None, &det, &data, &decode).expect("inference");
    (dets, data.iter().map(|s| s.boxes.clone()).collect())
}
