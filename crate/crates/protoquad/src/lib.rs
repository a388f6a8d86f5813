//! Prototype selection over gradient embeddings.
//!
//! Given a trained model, every example is embedded as the gradient of its
//! log-likelihood at the fitted parameters. A small weighted subset of
//! training points is then selected so that, in the metric-weighted kernel
//! space those embeddings induce, the subset approximates the test set's
//! distribution. The crate provides the embedding and kernel machinery, the
//! greedy quadrature-based selector with three scalable variants, the
//! verification instruments behind its guarantees, and end-to-end workflows
//! for data cleaning, label repair and training-set summarization.
//!
//! The numeric core is generic over the scalar type; `f64` aliases are
//! exported at the crate root and are what the CLI uses.

pub mod analysis;
pub mod cli;
pub mod diagnose;
pub mod embedding;
pub mod error;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod num;
pub mod rng;
pub mod select;
pub mod workflows;

pub use error::{Error, Result};
pub use num::Real;

/// `f64` aliases for the common types.
pub type Matrix64 = linalg::Matrix<f64>;
pub type Dataset64 = embedding::Dataset<f64>;
pub type ParamVector64 = embedding::ParamVector<f64>;
pub type GradientMatrix64 = embedding::GradientMatrix<f64>;
pub type FisherMetric64 = embedding::FisherMetric<f64>;
pub type KernelOracle64 = kernel::KernelOracle<f64>;
pub type AffinityVector64 = kernel::AffinityVector<f64>;
pub type SelectionReport64 = select::SelectionReport<f64>;
pub type SelectParams64 = select::SelectParams<f64>;
