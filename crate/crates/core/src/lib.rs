//! Co-trained semi-supervised segmentation for the cross-domain setting:
//! one labeled source domain, several unlabeled shifted domains, evaluation
//! on an unseen target domain.
//!
//! Two sub-models with identical architecture but different initialization
//! supervise each other on unlabeled data at two levels — hard pseudo-labels
//! weighted by prediction variance, and feature-space consistency between
//! original and style-augmented inputs — while each sub-model additionally
//! solves its own self-supervised pretext task (mixed-patch localization on
//! one, patch-rotation prediction on the other). A synthetic multi-domain
//! benchmark makes the whole pipeline testable end to end without any
//! external dataset.
//!
//! The numeric core is generic over the scalar type ([`scalar::Scalar`]):
//! `f64` for verification (finite-difference gradient checks, spectral
//! oracles) and `f32` for training throughput.

pub mod augment;
pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{CosegError, Result};

/// Scalar lane used by the CLI and training presets.
pub type TrainFloat = f32;
/// Scalar lane used by verification oracles and gradient checks.
pub type CheckFloat = f64;

pub type ImageTensor32 = datagen::ImageTensor<TrainFloat>;
pub type ImageTensor64 = datagen::ImageTensor<CheckFloat>;
pub type LabelMask = datagen::LabelMask;
pub type ProbMap32 = model::ProbMap<TrainFloat>;
pub type ProbMap64 = model::ProbMap<CheckFloat>;
pub type TrainState32 = trainer::TrainState<TrainFloat>;
pub type TrainState64 = trainer::TrainState<CheckFloat>;
