//! Multi-task LoRA finetuning with a hierarchical Gaussian prior.
//!
//! Each task `d` owns an adapter set `theta_d`; all adapter sets are shrunk
//! toward shared mean parameters `Theta` with precision `tau`. The crate
//! bundles everything needed to run that experiment at desk scale: a small
//! reverse-mode autodiff engine, a decoder-only transformer, LoRA adapters,
//! the MAP objective and trainer, synthetic corpora, metrics, and a sweep
//! harness that writes CSV, SVG and a reproducibility manifest.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
