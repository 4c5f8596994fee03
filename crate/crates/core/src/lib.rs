//! Left-ventricle caliper landmark detection.
//!
//! Six caliper endpoints (IVS, LVID and LVPW, two each) are predicted as
//! heatmaps by a CoordConv U-Net, decoded with a differentiable center of
//! mass, and turned into the three wall/cavity measurements.
//!
//! Modules, bottom up:
//! - [`geometry`]: coordinate conventions, landmark and measurement types
//! - [`heatmap`]: oriented Gaussian labels, softmax normalization, decoding
//! - [`loss`]: heatmap, coordinate, distance and angle terms with gradients
//! - [`nn`] / [`model`]: the CPU convolution engine and the U-Net
//! - [`data`]: phantom generator, augmentation, manifests, splits
//! - [`pipeline`]: training, evaluation, benchmarking and reports
//! - [`config`]: the run configuration document used by the CLI

pub mod config;
pub mod data;
pub mod geometry;
pub mod heatmap;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pipeline;
