//! Gradient-based meta-learning with semi-supervised target adaptation for
//! subject-transfer classification of multichannel time series.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`ops`], [`tape`], [`gradcheck`]: dense arrays, layer
//!   kernels, reverse-mode differentiation and finite-difference checks.
//! * [`backbones`], [`checkpoint`]: MLP / STNN / CNN models and their
//!   on-disk format.
//! * [`objectives`], [`optim`]: joint cross-entropy + center loss, center
//!   updates, SGD and Adam.
//! * [`meta`]: first-order MAML pre-training over source subjects.
//! * [`adapt`]: pseudo-label filtering and semi-supervised fine-tuning on a
//!   target subject.
//! * [`data`]: datasets, the MSHD file format, LOSO / few-shot splits and a
//!   synthetic subject-shift generator.
//! * [`harness`]: leave-one-subject-out experiments, metrics, Wilcoxon
//!   signed-rank test and CSV reporting.

pub mod adapt;
pub mod backbones;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod meta;
pub mod objectives;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use backbones::{build, BackboneKind, ForwardResult, ModelParams, ModelSpec};
pub use error::{Error, Result};
pub use objectives::ClassCenters;
pub use tensor::Tensor;
