//! Detection-guided IR to RGB translation: data generation, a compact
//! anchor-free detector, a translation U-Net, classical baselines,
//! training loops and AP@50 evaluation.

pub mod classic;
pub mod data;
pub mod detector;
pub mod error;
pub mod graph;
pub mod hallucinet;
pub mod image_io;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use types::{
    bbox_area, sort_detections, BBox, Dataset, Detection, DetectionSet, ImagePlane, LossWeights,
    Modality, PairedSample,
};
