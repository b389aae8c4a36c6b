//! Hybrid masked-reconstruction and self-distillation pretraining for
//! gridded infrared imagery, with gap-fill evaluation, embedding
//! diagnostics, and downstream task heads.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dino;
pub mod error;
pub mod field;
pub mod gapfill;
pub mod heads;
pub mod mae;
pub mod metrics;
pub mod model;
pub mod params;
pub mod patch;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{GaiaError, Result};
pub use field::{Field, NormalizationSpec};
pub use patch::{MaskFamily, MaskSpec, PatchGrid};
