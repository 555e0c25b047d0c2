//! State-space model abstractions and the linear-Gaussian benchmark model.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::logspace::LogValue;
use crate::rng::SeedStream;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),
    #[error("observation dimension {d_y} exceeds state dimension {d_x}")]
    ObsDimTooLarge { d_x: usize, d_y: usize },
    #[error("sampler callback not available for this model")]
    SamplerUnavailable,
    #[error("observations must be non-empty and finite")]
    BadObservations,
}

/// A state-space model: prior over the initial state, per-step dynamic
/// kernels, and per-step observation kernels, all with tractable log-density
/// evaluation. Sampling callbacks are optional (simulation only).
pub trait Ssm: Send + Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn prior_logpdf(&self, x0: &DVector<f64>) -> LogValue;
    fn transition_logpdf(&self, t: usize, x_t: &DVector<f64>, x_prev: &DVector<f64>) -> LogValue;
    fn observation_logpdf(&self, t: usize, y_t: &DVector<f64>, x_t: &DVector<f64>) -> LogValue;

    /// Flat parameter vector theta.
    fn params(&self) -> DVector<f64>;

    fn prior_sample(&self, _rng: &mut SeedStream) -> Result<DVector<f64>, SsmError> {
        Err(SsmError::SamplerUnavailable)
    }

    fn transition_sample(
        &self,
        _t: usize,
        _x_prev: &DVector<f64>,
        _rng: &mut SeedStream,
    ) -> Result<DVector<f64>, SsmError> {
        Err(SsmError::SamplerUnavailable)
    }

    fn observation_sample(
        &self,
        _t: usize,
        _x_t: &DVector<f64>,
        _rng: &mut SeedStream,
    ) -> Result<DVector<f64>, SsmError> {
        Err(SsmError::SamplerUnavailable)
    }
}

/// Precomputed multivariate normal with fixed covariance.
#[derive(Debug, Clone)]
pub struct MvNormal {
    dim: usize,
    inv: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    logdet: f64,
}

impl MvNormal {
    pub fn new(cov: &DMatrix<f64>) -> Result<Self, SsmError> {
        let dim = cov.nrows();
        if cov.ncols() != dim || dim == 0 {
            return Err(SsmError::Dimension("covariance must be square and non-empty".into()));
        }
        let sym_err = (cov - cov.transpose()).abs().max();
        if sym_err > 1e-10 {
            return Err(SsmError::NotSpd(format!("asymmetry {sym_err:.2e}")));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| SsmError::NotSpd("Cholesky factorisation failed".into()))?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(MvNormal { dim, inv: chol.inverse(), chol_l: chol.l(), logdet })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Log-density of the zero-mean normal at `residual`.
    pub fn logpdf_residual(&self, residual: &DVector<f64>) -> LogValue {
        let quad = residual.dot(&(&self.inv * residual));
        LogValue::new(-0.5 * (self.dim as f64 * LN_2PI + self.logdet + quad))
            .expect("Gaussian log-density is finite")
    }

    /// Draw `mean + L eps` with `eps` standard normal.
    pub fn sample(&self, mean: &DVector<f64>, rng: &mut SeedStream) -> DVector<f64> {
        mean + &self.chol_l * rng.normal_vector(self.dim)
    }

    pub fn chol_l(&self) -> &DMatrix<f64> {
        &self.chol_l
    }
}

/// Linear-Gaussian state-space model:
/// `x_t = A x_{t-1} + q_t`, `y_t = H x_t + r_t`, `x_0 ~ N(m0, P0)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianSsm {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_cov: DMatrix<f64>,
    trans_noise: MvNormal,
    obs_noise: MvNormal,
    prior: MvNormal,
}

impl LinearGaussianSsm {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
    ) -> Result<Self, SsmError> {
        let d_x = a.nrows();
        let d_y = h.nrows();
        if a.ncols() != d_x || h.ncols() != d_x || prior_mean.len() != d_x {
            return Err(SsmError::Dimension("A, H, prior mean disagree on d_x".into()));
        }
        let trans_noise = MvNormal::new(&q)?;
        let obs_noise = MvNormal::new(&r)?;
        let prior = MvNormal::new(&prior_cov)?;
        if trans_noise.dim() != d_x || obs_noise.dim() != d_y || prior.dim() != d_x {
            return Err(SsmError::Dimension("noise covariances disagree with A, H".into()));
        }
        Ok(LinearGaussianSsm { a, h, q, r, prior_mean, prior_cov, trans_noise, obs_noise, prior })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
}

/// The benchmark model: `A[i][j] = 0.38^(|i-j|+1)`, `H` the rectangular
/// identity, unit process and observation noise, standard normal prior.
pub fn lg_build(d_x: usize, d_y: usize) -> Result<LinearGaussianSsm, SsmError> {
    if d_x == 0 || d_y == 0 {
        return Err(SsmError::Dimension("dimensions must be at least 1".into()));
    }
    if d_y > d_x {
        return Err(SsmError::ObsDimTooLarge { d_x, d_y });
    }
    let a = DMatrix::from_fn(d_x, d_x, |i, j| {
        0.38f64.powi((i as i32 - j as i32).abs() + 1)
    });
    let h = DMatrix::from_fn(d_y, d_x, |i, j| if i == j { 1.0 } else { 0.0 });
    LinearGaussianSsm::new(
        a,
        h,
        DMatrix::identity(d_x, d_x),
        DMatrix::identity(d_y, d_y),
        DVector::zeros(d_x),
        DMatrix::identity(d_x, d_x),
    )
}

impl Ssm for LinearGaussianSsm {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn prior_logpdf(&self, x0: &DVector<f64>) -> LogValue {
        self.prior.logpdf_residual(&(x0 - &self.prior_mean))
    }

    fn transition_logpdf(&self, _t: usize, x_t: &DVector<f64>, x_prev: &DVector<f64>) -> LogValue {
        self.trans_noise.logpdf_residual(&(x_t - &self.a * x_prev))
    }

    fn observation_logpdf(&self, _t: usize, y_t: &DVector<f64>, x_t: &DVector<f64>) -> LogValue {
        self.obs_noise.logpdf_residual(&(y_t - &self.h * x_t))
    }

    fn params(&self) -> DVector<f64> {
        let mut theta = Vec::new();
        theta.extend(self.a.transpose().iter());
        theta.extend(self.h.transpose().iter());
        DVector::from_vec(theta)
    }

    fn prior_sample(&self, rng: &mut SeedStream) -> Result<DVector<f64>, SsmError> {
        Ok(self.prior.sample(&self.prior_mean, rng))
    }

    fn transition_sample(
        &self,
        _t: usize,
        x_prev: &DVector<f64>,
        rng: &mut SeedStream,
    ) -> Result<DVector<f64>, SsmError> {
        Ok(self.trans_noise.sample(&(&self.a * x_prev), rng))
    }

    fn observation_sample(
        &self,
        _t: usize,
        x_t: &DVector<f64>,
        rng: &mut SeedStream,
    ) -> Result<DVector<f64>, SsmError> {
        Ok(self.obs_noise.sample(&(&self.h * x_t), rng))
    }
}

/// Observed sequence `y_{0:T}`, one vector per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSequence {
    data: Vec<DVector<f64>>,
}

impl ObservationSequence {
    pub fn new(data: Vec<DVector<f64>>) -> Result<Self, SsmError> {
        if data.is_empty() || data.iter().any(|y| y.iter().any(|v| !v.is_finite())) {
            return Err(SsmError::BadObservations);
        }
        let dim = data[0].len();
        if data.iter().any(|y| y.len() != dim) {
            return Err(SsmError::BadObservations);
        }
        Ok(ObservationSequence { data })
    }

    /// Number of time steps T+1.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> usize {
        self.data.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.data[0].len()
    }

    pub fn at(&self, t: usize) -> &DVector<f64> {
        &self.data[t]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DVector<f64>> {
        self.data.iter()
    }
}

/// Latent trajectory `x_{0:T}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Ancestrally simulate a trajectory and its observations.
pub fn simulate(
    ssm: &impl Ssm,
    horizon: usize,
    rng: &mut SeedStream,
) -> Result<(Trajectory, ObservationSequence), SsmError> {
    let mut states = Vec::with_capacity(horizon + 1);
    let mut obs = Vec::with_capacity(horizon + 1);
    let mut x = ssm.prior_sample(rng)?;
    obs.push(ssm.observation_sample(0, &x, rng)?);
    states.push(x.clone());
    for t in 1..=horizon {
        x = ssm.transition_sample(t, &x, rng)?;
        obs.push(ssm.observation_sample(t, &x, rng)?);
        states.push(x.clone());
    }
    Ok((Trajectory { states }, ObservationSequence::new(obs)?))
}

/// Diagonal-noise linear-Gaussian model with a flat differentiable parameter
/// vector. Noise scales are parameterised by log standard deviations and `H`
/// carries a structural mask, so every coordinate of theta has a well-defined
/// gradient.
///
/// Layout of theta: `vec(A)` row-major, `vec(H)` row-major, `log_q`, `log_r`,
/// `prior_mean`, `prior_log_std`.
#[derive(Debug, Clone)]
pub struct DiagonalLgSsm {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub h_mask: DMatrix<f64>,
    pub log_q: DVector<f64>,
    pub log_r: DVector<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_log_std: DVector<f64>,
}

fn diag_normal_logpdf(residual: &DVector<f64>, log_std: &DVector<f64>) -> f64 {
    let mut acc = -0.5 * residual.len() as f64 * LN_2PI;
    for (r, s) in residual.iter().zip(log_std.iter()) {
        acc -= s + 0.5 * r * r * (-2.0 * s).exp();
    }
    acc
}

impl DiagonalLgSsm {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        log_q: DVector<f64>,
        log_r: DVector<f64>,
        prior_mean: DVector<f64>,
        prior_log_std: DVector<f64>,
    ) -> Result<Self, SsmError> {
        let mask = DMatrix::from_element(h.nrows(), h.ncols(), 1.0);
        Self::with_mask(a, h, mask, log_q, log_r, prior_mean, prior_log_std)
    }

    pub fn with_mask(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        h_mask: DMatrix<f64>,
        log_q: DVector<f64>,
        log_r: DVector<f64>,
        prior_mean: DVector<f64>,
        prior_log_std: DVector<f64>,
    ) -> Result<Self, SsmError> {
        let d_x = a.nrows();
        let d_y = h.nrows();
        if a.ncols() != d_x
            || h.ncols() != d_x
            || h_mask.shape() != h.shape()
            || log_q.len() != d_x
            || log_r.len() != d_y
            || prior_mean.len() != d_x
            || prior_log_std.len() != d_x
        {
            return Err(SsmError::Dimension("diagonal LG parameter shapes disagree".into()));
        }
        Ok(DiagonalLgSsm { a, h, h_mask, log_q, log_r, prior_mean, prior_log_std })
    }

    /// Effective observation matrix `H (*) mask`.
    pub fn h_eff(&self) -> DMatrix<f64> {
        self.h.component_mul(&self.h_mask)
    }

    pub fn theta(&self) -> DVector<f64> {
        let mut v = Vec::new();
        for i in 0..self.a.nrows() {
            v.extend(self.a.row(i).iter());
        }
        for i in 0..self.h.nrows() {
            v.extend(self.h.row(i).iter());
        }
        v.extend(self.log_q.iter());
        v.extend(self.log_r.iter());
        v.extend(self.prior_mean.iter());
        v.extend(self.prior_log_std.iter());
        DVector::from_vec(v)
    }

    pub fn with_theta(&self, theta: &DVector<f64>) -> Result<Self, SsmError> {
        let d_x = self.a.nrows();
        let d_y = self.h.nrows();
        let expected = d_x * d_x + d_y * d_x + d_x + d_y + d_x + d_x;
        if theta.len() != expected {
            return Err(SsmError::Dimension(format!(
                "theta has {} entries, expected {expected}",
                theta.len()
            )));
        }
        let mut k = 0;
        let mut take = |n: usize| {
            let s = theta.rows(k, n).into_owned();
            k += n;
            s
        };
        let a = DMatrix::from_row_slice(d_x, d_x, take(d_x * d_x).as_slice());
        let h = DMatrix::from_row_slice(d_y, d_x, take(d_y * d_x).as_slice());
        let log_q = take(d_x);
        let log_r = take(d_y);
        let prior_mean = take(d_x);
        let prior_log_std = take(d_x);
        Self::with_mask(a, h, self.h_mask.clone(), log_q, log_r, prior_mean, prior_log_std)
    }

    pub fn theta_len(&self) -> usize {
        self.theta().len()
    }

    /// Dense-covariance view for the Kalman/RTS baselines.
    pub fn to_linear_gaussian(&self) -> Result<LinearGaussianSsm, SsmError> {
        let q = DMatrix::from_diagonal(&self.log_q.map(|s| (2.0 * s).exp()));
        let r = DMatrix::from_diagonal(&self.log_r.map(|s| (2.0 * s).exp()));
        let p0 = DMatrix::from_diagonal(&self.prior_log_std.map(|s| (2.0 * s).exp()));
        LinearGaussianSsm::new(self.a.clone(), self.h_eff(), q, r, self.prior_mean.clone(), p0)
    }

    /// Gradient of the prior log-density: (d/dx, d/dtheta-block contributions).
    pub fn prior_grads(&self, x0: &DVector<f64>) -> PriorGrads {
        let inv_var = self.prior_log_std.map(|s| (-2.0 * s).exp());
        let resid = x0 - &self.prior_mean;
        let scaled = resid.component_mul(&inv_var);
        PriorGrads {
            wrt_x: -&scaled,
            wrt_prior_mean: scaled.clone(),
            wrt_prior_log_std: DVector::from_fn(resid.len(), |k, _| {
                -1.0 + resid[k] * resid[k] * inv_var[k]
            }),
        }
    }

    pub fn transition_grads(&self, x_t: &DVector<f64>, x_prev: &DVector<f64>) -> TransitionGrads {
        let inv_var = self.log_q.map(|s| (-2.0 * s).exp());
        let resid = x_t - &self.a * x_prev;
        let scaled = resid.component_mul(&inv_var);
        TransitionGrads {
            wrt_x: -&scaled,
            wrt_x_prev: self.a.transpose() * &scaled,
            wrt_a: &scaled * x_prev.transpose(),
            wrt_log_q: DVector::from_fn(resid.len(), |k, _| {
                -1.0 + resid[k] * resid[k] * inv_var[k]
            }),
        }
    }

    pub fn observation_grads(&self, y_t: &DVector<f64>, x_t: &DVector<f64>) -> ObservationGrads {
        let inv_var = self.log_r.map(|s| (-2.0 * s).exp());
        let resid = y_t - self.h_eff() * x_t;
        let scaled = resid.component_mul(&inv_var);
        ObservationGrads {
            wrt_x: self.h_eff().transpose() * &scaled,
            wrt_h: (&scaled * x_t.transpose()).component_mul(&self.h_mask),
            wrt_log_r: DVector::from_fn(resid.len(), |k, _| {
                -1.0 + resid[k] * resid[k] * inv_var[k]
            }),
        }
    }
}

pub struct PriorGrads {
    pub wrt_x: DVector<f64>,
    pub wrt_prior_mean: DVector<f64>,
    pub wrt_prior_log_std: DVector<f64>,
}

pub struct TransitionGrads {
    pub wrt_x: DVector<f64>,
    pub wrt_x_prev: DVector<f64>,
    pub wrt_a: DMatrix<f64>,
    pub wrt_log_q: DVector<f64>,
}

pub struct ObservationGrads {
    pub wrt_x: DVector<f64>,
    pub wrt_h: DMatrix<f64>,
    pub wrt_log_r: DVector<f64>,
}

impl Ssm for DiagonalLgSsm {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn prior_logpdf(&self, x0: &DVector<f64>) -> LogValue {
        LogValue::new(diag_normal_logpdf(&(x0 - &self.prior_mean), &self.prior_log_std))
            .expect("finite log-density")
    }

    fn transition_logpdf(&self, _t: usize, x_t: &DVector<f64>, x_prev: &DVector<f64>) -> LogValue {
        LogValue::new(diag_normal_logpdf(&(x_t - &self.a * x_prev), &self.log_q))
            .expect("finite log-density")
    }

    fn observation_logpdf(&self, _t: usize, y_t: &DVector<f64>, x_t: &DVector<f64>) -> LogValue {
        LogValue::new(diag_normal_logpdf(&(y_t - self.h_eff() * x_t), &self.log_r))
            .expect("finite log-density")
    }

    fn params(&self) -> DVector<f64> {
        self.theta()
    }

    fn prior_sample(&self, rng: &mut SeedStream) -> Result<DVector<f64>, SsmError> {
        let eps = rng.normal_vector(self.state_dim());
        Ok(&self.prior_mean + self.prior_log_std.map(|s| s.exp()).component_mul(&eps))
    }

    fn transition_sample(
        &self,
        _t: usize,
        x_prev: &DVector<f64>,
        rng: &mut SeedStream,
    ) -> Result<DVector<f64>, SsmError> {
        let eps = rng.normal_vector(self.state_dim());
        Ok(&self.a * x_prev + self.log_q.map(|s| s.exp()).component_mul(&eps))
    }

    fn observation_sample(
        &self,
        _t: usize,
        x_t: &DVector<f64>,
        rng: &mut SeedStream,
    ) -> Result<DVector<f64>, SsmError> {
        let eps = rng.normal_vector(self.obs_dim());
        Ok(self.h_eff() * x_t + self.log_r.map(|s| s.exp()).component_mul(&eps))
    }
}
