//! Category-agnostic 6D pose, size and dense-shape estimation from a single
//! partial point cloud with per-point features.

pub mod autodiff;
pub mod cli;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod objective;
pub mod synthdata;
pub mod trainer;
