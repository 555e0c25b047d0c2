//! Parallel-in-time importance smoothing for state-space models.
//!
//! The library computes marginal smoothing weights and an unbiased likelihood
//! estimate for a factorised-proposal importance sampler by running one fused
//! prefix/suffix scan over log-domain kernel matrices, together with exact
//! linear-Gaussian baselines (Kalman filter, RTS smoother), a bootstrap
//! particle filter, a brute-force enumeration oracle, evidence-lower-bound
//! estimators with reparameterised gradients, and evaluation metrics.
//!
//! Log-domain numerics (`logspace`) and the scan machinery (`scan`) are
//! generic over the scalar/element type; the model layer is pinned to `f64`.

pub mod baselines;
pub mod experiment;
pub mod gradient;
pub mod io;
pub mod logspace;
pub mod metrics;
pub mod oracle;
pub mod proposal;
pub mod pvmc;
pub mod rng;
pub mod scan;
pub mod ssm;

/// Log-domain scalar at the crate's working precision.
pub type LogValue = logspace::LogScalar<f64>;
/// Log-domain matrix at the crate's working precision.
pub type LogMat = logspace::LogMatrix<f64>;
