//! Regression across heterogeneous environments: ensemble estimators
//! built from stability-filtered predictor subsets, competing
//! baselines, ground-truth causal oracles, and benchmark tooling.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod lasso;
pub mod linear;
pub mod predscore;
pub mod rng;
pub mod scm;
pub mod sim;
pub mod sr;
pub mod stability;
pub mod stabsel;

pub use dataset::MultiEnvDataset;
pub use error::{Error, Result};
pub use linear::SubsetFit;
pub use scm::{BlanketTruth, LinearSCM};
pub use sr::{fit_sr, predict_sr, SRConfig, SRModel};
