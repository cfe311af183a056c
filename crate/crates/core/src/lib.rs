//! Neural additive models with a linearized Laplace posterior.
//!
//! One small network per feature (and optionally per feature pair) is trained
//! to a MAP estimate, after which each network receives an independent
//! Gaussian posterior block. The blocks give per-feature uncertainty bands, an
//! evidence bound for tuning prior precisions, and mutual-information scores
//! for picking which feature pairs deserve their own joint network.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod data_io;
pub mod error;
pub mod evaluate;
pub mod exec;
pub mod feature_net;
pub mod interaction;
pub mod laplace;
pub mod model;
pub mod numerics;

pub use data_io::{Dataset, Standardization, Task};
pub use error::{Error, Result};
pub use exec::Execution;
pub use feature_net::{FeatureNetwork, JointFeatureNetwork, Subnetwork};
pub use laplace::{fit_posterior, CurvatureConfig, CurvatureKind, Posterior, PosteriorBlock};
pub use model::{train_map, AdditiveModel, LikelihoodSpec, TrainConfig};
pub use numerics::{Matrix, SymMatrix};
