//! Discrete residual flow forecasting of pedestrian occupancy.
//!
//! The crate is organized bottom-up:
//!
//! - [`grid`]: grid geometry and categorical distributions in log space.
//! - [`scenario`]: synthetic street scenes, perception noise, dataset files.
//! - [`raster`]: bird's-eye-view rasterization of a scenario around the PoI.
//! - [`tensor`]: a small reverse-mode autodiff engine with Adam.
//! - [`backbone`]: residual pyramid feature extractor.
//! - [`heads`]: per-timestep prediction heads (fully-conv, DRR, DRF, ConvLSTM, MDN).
//! - [`metrics`]: likelihood, displacement, multimodality, semantic and calibration metrics.

pub mod error;
pub mod geometry;
pub mod grid;
pub mod scenario;
pub mod raster;
pub mod tensor;
pub mod layers;
pub mod backbone;
pub mod heads;
pub mod metrics;

pub use error::{DrfError, Result};
