//! Crowd counting with pyramid features and density-aware decoding.
//!
//! The crate covers the whole pipeline: synthetic scene generation, ground
//! truth density rendering, augmentation, the network itself (with its own
//! small autograd engine), training, and MAE/MSE evaluation.

pub mod attention;
pub mod augmentation;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod density_gt;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod losses;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use config::PdaNetConfig;
pub use data_io::{AnnotatedScene, DensityMap, Point};
pub use density_gt::DensityClass;
pub use error::{Error, Result};
pub use model::{ModelOutput, PdaNet};
