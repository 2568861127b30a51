//! Desk-scale adversarial robustness workbench.
//!
//! The crate bundles a small dual-encoder image classifier with explicit
//! gradients, three white-box attacks (FGSM, DeepFool and an APGD-based
//! AutoAttack ensemble) plus two ways of combining them, static adversarial
//! fine-tuning, four detector families trained on encoder features, and the
//! metrics/report machinery used to compare all of it.

pub mod advtrain;
pub mod attacks;
pub mod container;
pub mod data;
pub mod detectors;
pub mod error;
pub mod metrics;
pub mod model;
pub mod seed;

pub use advtrain::{AdvTrainConfig, EvalReport, Mix};
pub use attacks::{AdvExample, AttackConfig};
pub use data::{ImageSample, ImageShape, LabeledDataset};
pub use detectors::{Detector, DetectorKind, FeatureSet};
pub use error::{Error, Result};
pub use metrics::{ConfusionMatrix, MetricsBundle};
pub use model::{Arch, Classifier, DualEncoderModel, LossKind};
