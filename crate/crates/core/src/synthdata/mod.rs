//! Synthetic scenes: analytic primitives in canonical frames, hemisphere
//! cameras, ray-cast depth, back-projected partial clouds with a disk
//! occluder, surface-sampled dense ground truth and a feature stub standing
//! in for an image encoder.

mod camera;
mod dataset;
mod features;
mod render;
mod shapes;

pub use camera::{sample_camera, sample_camera_with, CameraModel, CameraSampling, Intrinsics};
pub use dataset::{
    generate_dataset, generate_sample, generate_samples, load_dataset, load_manifest, write_dataset, Dataset,
    DatasetConfig, Manifest, SampleRecord, SceneSample, TextureMode, BLOB_FILE, DENSE_POINTS, MANIFEST_FILE,
    SCHEMA_VERSION,
};
pub use features::{stub_features, FeatureProvider, SinusoidFeatures, MIN_FEATURE_DIM, NOISE_CLAMP};
pub use render::{add_depth_noise, apply_occlusion, backproject, render_depth, DepthMap};
pub use shapes::{sample_surface, PrimitiveKind, PrimitiveShape};

use thiserror::Error;

use crate::geometry::GeometryError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("object projects to no pixels")]
    NoVisiblePixels,
    #[error("occlusion fraction {0} not in {{0, 0.25, 0.5, 0.75}}")]
    InvalidOcclusion(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
