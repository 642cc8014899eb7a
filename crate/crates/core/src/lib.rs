//! Discovery and exploitation of latent sub-populations in recommendation data.
//!
//! Interaction logs are rarely homogeneous: different sub-populations rate by
//! different mechanisms (`E`-kind heterogeneity) and cover different regions of
//! the covariate space (`R`-kind heterogeneity). This crate provides
//!
//! * [`data`] — dataset loading, encoding, binarization, and splitting;
//! * [`models`] — MF/FM backbones with weighted SGD training;
//! * [`bhe`] — bilevel heterogeneity exploration: an EM-style loop that
//!   clusters samples by prediction mechanism, then k-means within each
//!   environment over learned embeddings;
//! * [`exploit`] — per-environment sub-models composed through an environment
//!   classifier;
//! * [`debias`] — propensity estimation (global and per-environment) with
//!   IPS/SNIPS training;
//! * [`eval`] — ranking metrics, compactness, and report tables;
//! * [`synth`] — synthetic generators with known environment ground truth and
//!   a controllable missing-not-at-random observation process.
//!
//! All numeric code is generic over the scalar type through [`scalar::Scalar`];
//! `f64` is the default everywhere and the type the command-line pipeline
//! uses. `F32` aliases are exported at the crate root for single-precision
//! instantiations.

pub mod bhe;
pub mod data;
pub mod debias;
pub mod error;
pub mod eval;
pub mod exploit;
pub mod matrix;
pub mod models;
pub mod scalar;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision aliases for the main domain types. The unsuffixed names
/// default to `f64`.
pub type DatasetF32 = data::Dataset<f32>;
pub type InteractionF32 = data::Interaction<f32>;
pub type MfModelF32 = models::MfModel<f32>;
pub type FmModelF32 = models::FmModel<f32>;
pub type FactorModelF32 = models::FactorModel<f32>;
pub type EnvAssignmentF32 = bhe::EnvAssignment<f32>;
pub type ComposedRecommenderF32 = exploit::ComposedRecommender<f32>;
pub type PropensityTableF32 = debias::PropensityTable<f32>;
