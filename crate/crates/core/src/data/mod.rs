//! Sketch and photo ingestion, preprocessing, augmentation, the synthetic
//! cross-domain dataset and triplet sampling.

mod augment;
mod dataset;
mod edges;
mod manifest;
mod prep;
mod raster;
mod sampling;
mod skeleton;
mod sketch;
mod synth;

pub use augment::{apply_geometric, augment_geometric, draw_geometric, GeometricParams, ROTATION_RANGE_DEG, SCALE_RANGE};
pub use dataset::{Dataset, SketchAsset};
pub use edges::{extract_edges, EdgeThresholds};
pub use manifest::{DatasetManifest, Domain, ManifestItem, Split};
pub use prep::{PhotoInput, PrepConfig, Preprocessor};
pub use raster::{rasterize, RasterImage};
pub use sampling::{sample_triplets, Granularity, TripletSample, TripletSampler};
pub use skeleton::{count_components, foreground_mask, skeletonize};
pub use sketch::{augment_stroke_removal, stroke_groups, StrokeSketch, STROKE_REMOVAL_MIN_STROKES};
pub use synth::{synth_generate, SynthConfig, SHAPE_FAMILIES};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sketch document: {field}: {msg}")]
    Sketch { field: String, msg: String },
    #[error("sketch document: {0}")]
    SketchSyntax(String),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("manifest line {line}: {msg}")]
    ManifestLine { line: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("image `{path}`: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> DataError {
    DataError::Invalid { op, msg: msg.into() }
}
