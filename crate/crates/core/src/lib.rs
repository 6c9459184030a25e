//! Mixed-effects deep learning toolkit.
//!
//! Trains feed-forward networks under a Gaussian negative log-likelihood with
//! structured covariance over random effects (random intercepts, multiple
//! categorical features, longitudinal polynomials, spatial RBF kernels and
//! combinations), using mini-batch sub-covariance inversion. Provides BLUP
//! prediction, a binary-GLMM extension via Gauss-Hermite quadrature, synthetic
//! data generators, an eigenvalue-decay diagnostic and an experiment harness.

pub mod covariance;
pub mod eigendecay;
pub mod error;
pub mod glmm;
pub mod harness;
pub mod linalg;
pub mod nll;
pub mod nn;
pub mod predict;
pub mod simgen;

pub use covariance::{CovKind, CovarianceSpec, GMode, GzMatrix, ReDesignData, VarianceComponents};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentReport, Method};
pub use linalg::{CholeskyFactor, DenseMatrix, SparseDesign};
pub use nll::{BatchLossResult, DataView, History, NetConfig, TrainConfig, TrainedModel};
pub use nn::{Activation, EmbeddingTable, LayerSpec, Mlp, OptimAlgo, Optimizer};
pub use predict::{BlupConfig, FittedModel};
pub use simgen::{GroundTruth, MixedDataset, Scenario, SimGMode, SimSpec, SplitMode};
