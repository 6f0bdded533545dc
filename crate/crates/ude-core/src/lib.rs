//! A desk-scale laboratory for unsupervised domain expansion.
//!
//! Trains source-only, domain-adapted (DDC / DANN / CDAN / CDAN+), and
//! knowledge-distilled domain-expanded classifiers on synthetic 2-D datasets,
//! and evaluates them on the source, target, and expanded domains.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`ops`] / [`optim`]: a minimal reverse-mode differentiation
//!   engine and SGD, sufficient for MLPs with batch normalization;
//! - [`data`]: concentric-circles source domain, horizontal target shift,
//!   stratified splits, CSV persistence;
//! - [`models`]: the MLP backbone, discriminators, gradient reversal, and
//!   versioned weight files;
//! - [`losses`]: classification, discrepancy, adversarial, and distillation
//!   objectives;
//! - [`train`]: the three training procedures and their schedules;
//! - [`metrics`]: the evaluation protocol (per-domain and expanded accuracy,
//!   F1, AUC, retrieval, boundary and feature export);
//! - [`baselines`]: model-selection and ensemble comparison systems.

pub mod baselines;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use data::{Dataset, Matrix};
pub use error::{Error, Result};
pub use losses::{KdVariant, LossValue};
pub use metrics::EvalReport;
pub use models::{Discriminator, Mode, Network};
pub use optim::Sgd;
pub use tensor::Tensor;
pub use train::{RunRecord, TrainConfig};
