//! Parallel-in-time importance smoothing.
//!
//! The smoother weights every trajectory that can be formed by picking one
//! particle per time step. Kernel slabs hold the local transition-times-
//! likelihood-over-proposal ratios between adjacent particle columns; the
//! marginal weight of particle `i` at time `t` sums the product of slabs over
//! all `N^(T+1)` trajectories passing through it. That sum factorises through
//! an associative operator on pairs of `N x N` matrices,
//! `(C1, C2) (+) (D1, D2) = (C1, C2 D1 D2)`, so one fused prefix/suffix scan
//! over slab pairs yields every marginal weight and the likelihood estimate
//! in logarithmic depth.

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::logspace::{lse_raw, LogMatrix, LogValue, LogspaceError};
use crate::proposal::{
    sample_markov_proposal, sample_proposal, MarkovProposal, ParticleGrid, Proposal, ProposalError,
};
use crate::rng::SeedStream;
use crate::scan::{parallel_reduce, prefix_suffix_scan, ScanError, ScanPlan};
use crate::ssm::{ObservationSequence, Ssm};

pub type LogMat = LogMatrix<f64>;

#[derive(Debug, Error)]
pub enum PvmcError {
    #[error("grid horizon {grid} does not match observation horizon {obs}")]
    HorizonMismatch { grid: usize, obs: usize },
    #[error("ill-posed importance ratio: proposal density vanishes at (t = {t}, n = {n})")]
    IllPosedProposal { t: usize, n: usize },
    #[error("time index {t} out of range 0..={t_max}")]
    TimeOutOfRange { t: usize, t_max: usize },
    #[error("particle count must be at least 1")]
    NoParticles,
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Logspace(#[from] LogspaceError),
}

/// Log-domain kernel slabs.
///
/// `slab(t)` is `N x N` with entry `(i, j) = log K_t(X_t^j, X_{t-1}^i)`:
/// the row indexes the particle at `t-1`, the column the particle at `t`.
/// Slab 0 depends only on its column, so its rows are identical.
#[derive(Debug, Clone)]
pub struct KernelTensor {
    slabs: Vec<LogMat>,
}

impl KernelTensor {
    pub fn from_slabs(slabs: Vec<LogMat>) -> Self {
        assert!(!slabs.is_empty());
        let n = slabs[0].rows();
        assert!(slabs.iter().all(|s| s.rows() == n && s.cols() == n));
        KernelTensor { slabs }
    }

    /// Number of time steps `T + 1`.
    pub fn t_len(&self) -> usize {
        self.slabs.len()
    }

    pub fn horizon(&self) -> usize {
        self.slabs.len() - 1
    }

    pub fn n_particles(&self) -> usize {
        self.slabs[0].rows()
    }

    pub fn slab(&self, t: usize) -> &LogMat {
        &self.slabs[t]
    }

    /// Restrict to the first `n` particles (leading sub-blocks of all slabs).
    pub fn restrict(&self, n: usize) -> KernelTensor {
        KernelTensor { slabs: self.slabs.iter().map(|s| s.leading(n, n)).collect() }
    }
}

/// One element of the weight-scan semigroup: a pair of `N x N` log-matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement {
    pub first: LogMat,
    pub second: LogMat,
}

/// `(C1, C2) (+) (D1, D2) = (C1, C2 D1 D2)` in the log domain.
pub fn combine_elements(lhs: &ScanElement, rhs: &ScanElement) -> ScanElement {
    let mid = lhs
        .second
        .log_matmul(&rhs.first)
        .and_then(|m| m.log_matmul(&rhs.second))
        .expect("scan elements are square and conformable");
    ScanElement { first: lhs.first.clone(), second: mid }
}

fn identity_element(n: usize) -> ScanElement {
    ScanElement { first: LogMat::log_identity(n), second: LogMat::log_identity(n) }
}

/// Kernel slabs for a factorised proposal, Alg.-1 layout:
/// slab 0 column `j` is `log P + log H_0 - log V_0` at particle `j`; slab
/// `t > 0` entry `(i, j)` is `log M_t(X_t^j | X_{t-1}^i) + log H_t(y_t | X_t^j)
/// - log V_t(X_t^j)`.
pub fn compute_kernels(
    ssm: &impl Ssm,
    grid: &ParticleGrid,
    obs: &ObservationSequence,
) -> Result<KernelTensor, PvmcError> {
    if grid.t_len() != obs.len() {
        return Err(PvmcError::HorizonMismatch { grid: grid.horizon(), obs: obs.horizon() });
    }
    check_proposal_support(&grid.proposal_logpdf)?;
    let n = grid.n_particles();
    let t_len = grid.t_len();

    let slab0 = {
        let mut row = vec![0.0f64; n];
        for (j, slot) in row.iter_mut().enumerate() {
            let x = &grid.states[0][j];
            *slot = ssm.prior_logpdf(x).get() + ssm.observation_logpdf(0, obs.at(0), x).get()
                - grid.proposal_logpdf[0][j];
        }
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        LogMat::from_raw(n, n, data)?
    };

    let later: Result<Vec<LogMat>, PvmcError> = (1..t_len)
        .into_par_iter()
        .map(|t| {
            let mut col_term = vec![0.0f64; n];
            for (j, slot) in col_term.iter_mut().enumerate() {
                let x = &grid.states[t][j];
                *slot = ssm.observation_logpdf(t, obs.at(t), x).get() - grid.proposal_logpdf[t][j];
            }
            let mut data = Vec::with_capacity(n * n);
            for i in 0..n {
                let x_prev = &grid.states[t - 1][i];
                for (j, ct) in col_term.iter().enumerate() {
                    data.push(ssm.transition_logpdf(t, &grid.states[t][j], x_prev).get() + ct);
                }
            }
            Ok(LogMat::from_raw(n, n, data)?)
        })
        .collect();

    let mut slabs = vec![slab0];
    slabs.extend(later?);
    Ok(KernelTensor::from_slabs(slabs))
}

/// Kernel slabs for the Markovian mixture proposal: the per-column proposal
/// term becomes the uniform mixture density over all ancestors,
/// `log (1/N) sum_k V_t(X_t^j | X_{t-1}^k, y_{0:T})`, which still depends only
/// on the column, so the tensor feeds the same weight recursion unchanged.
pub fn markovian_kernels(
    ssm: &impl Ssm,
    mprop: &MarkovProposal,
    grid: &ParticleGrid,
    obs: &ObservationSequence,
) -> Result<KernelTensor, PvmcError> {
    if grid.t_len() != obs.len() {
        return Err(PvmcError::HorizonMismatch { grid: grid.horizon(), obs: obs.horizon() });
    }
    let n = grid.n_particles();
    let t_len = grid.t_len();

    let slab0 = {
        let mut row = vec![0.0f64; n];
        for (j, slot) in row.iter_mut().enumerate() {
            let x = &grid.states[0][j];
            let v0 = grid.proposal_logpdf[0][j];
            if !v0.is_finite() {
                return Err(PvmcError::IllPosedProposal { t: 0, n: j });
            }
            *slot =
                ssm.prior_logpdf(x).get() + ssm.observation_logpdf(0, obs.at(0), x).get() - v0;
        }
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        LogMat::from_raw(n, n, data)?
    };

    let mut slabs = vec![slab0];
    for t in 1..t_len {
        let prev = &grid.states[t - 1];
        let mut col_term = vec![0.0f64; n];
        for (j, slot) in col_term.iter_mut().enumerate() {
            let x = &grid.states[t][j];
            let denom = mprop.mixture_logpdf(x, prev, obs.at(t));
            if !denom.is_finite() {
                return Err(PvmcError::IllPosedProposal { t, n: j });
            }
            *slot = ssm.observation_logpdf(t, obs.at(t), x).get() - denom;
        }
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for (j, ct) in col_term.iter().enumerate() {
                data.push(
                    ssm.transition_logpdf(t, &grid.states[t][j], &prev[i]).get() + ct,
                );
            }
        }
        slabs.push(LogMat::from_raw(n, n, data)?);
    }
    Ok(KernelTensor::from_slabs(slabs))
}

fn check_proposal_support(logpdf: &[Vec<f64>]) -> Result<(), PvmcError> {
    for (t, col) in logpdf.iter().enumerate() {
        for (n, v) in col.iter().enumerate() {
            if !v.is_finite() {
                return Err(PvmcError::IllPosedProposal { t, n });
            }
        }
    }
    Ok(())
}

/// Output of the scan-based weight recursion: unnormalised marginal
/// log-weights and the raw likelihood total `log sum_i W_0^i`.
#[derive(Debug, Clone)]
pub struct WeightScan {
    /// `log_w[t][n]`, unnormalised.
    pub log_w: Vec<Vec<f64>>,
    pub log_l_hat_raw: LogValue,
    pub plan: ScanPlan,
}

impl WeightScan {
    /// `log sum_i W_t^i` per column; equal across columns up to roundoff.
    pub fn column_log_totals(&self) -> Vec<f64> {
        self.log_w.iter().map(|col| lse_raw(col)).collect()
    }
}

/// Marginal smoothing weights and likelihood via prefix/suffix scan.
///
/// Horizons 0 and 1 are handled directly. An even horizon is reduced to the
/// odd case by prepending an all-ones slab (all-zeros in the log domain);
/// because the padded system traverses every original trajectory once per
/// dummy index, the extracted weights carry a uniform factor of `N` that is
/// divided back out before returning.
pub fn pvmc_weights(kernels: &KernelTensor) -> Result<WeightScan, PvmcError> {
    pvmc_weights_impl(kernels, false)
}

/// `corrupt` injects a deliberate perturbation into every scan combine so
/// that validation harnesses can demonstrate the oracle check has teeth.
pub fn pvmc_weights_with_fault(
    kernels: &KernelTensor,
    corrupt: bool,
) -> Result<WeightScan, PvmcError> {
    pvmc_weights_impl(kernels, corrupt)
}

fn pvmc_weights_impl(kernels: &KernelTensor, corrupt: bool) -> Result<WeightScan, PvmcError> {
    let n = kernels.n_particles();
    let t_len = kernels.t_len();

    if t_len == 1 {
        let w0: Vec<f64> = kernels.slab(0).row_raw(0).to_vec();
        let total = lse_raw(&w0);
        return Ok(WeightScan {
            log_w: vec![w0],
            log_l_hat_raw: LogValue::new(total)?,
            plan: ScanPlan::empty(),
        });
    }
    if t_len == 2 {
        let k0 = kernels.slab(0).row_raw(0);
        let k1 = kernels.slab(1);
        let mut w0 = vec![f64::NEG_INFINITY; n];
        let mut w1 = vec![f64::NEG_INFINITY; n];
        let mut buf = vec![f64::NEG_INFINITY; n];
        for i in 0..n {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = k1.get(i, j).get();
            }
            w0[i] = k0[i] + lse_raw(&buf);
        }
        for (j, w) in w1.iter_mut().enumerate() {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = k0[i] + k1.get(i, j).get();
            }
            *w = lse_raw(&buf);
        }
        let total = lse_raw(&w0);
        return Ok(WeightScan {
            log_w: vec![w0, w1],
            log_l_hat_raw: LogValue::new(total)?,
            plan: ScanPlan::empty(),
        });
    }

    let padded = t_len % 2 == 1;
    let mut elements: Vec<ScanElement> = Vec::with_capacity(t_len / 2 + 1);
    if padded {
        elements.push(ScanElement {
            first: LogMat::log_ones(n, n),
            second: kernels.slab(0).clone(),
        });
        for s in 0..t_len / 2 {
            elements.push(ScanElement {
                first: kernels.slab(2 * s + 1).clone(),
                second: kernels.slab(2 * s + 2).clone(),
            });
        }
    } else {
        for s in 0..t_len / 2 {
            elements.push(ScanElement {
                first: kernels.slab(2 * s).clone(),
                second: kernels.slab(2 * s + 1).clone(),
            });
        }
    }

    let combine = |a: &ScanElement, b: &ScanElement| {
        let mut out = combine_elements(a, b);
        if corrupt {
            let bumped = out.second.get(0, 0).get().max(-1.0e300) + 0.25;
            out.second.set(0, 0, LogValue::new(bumped).expect("finite fault value"));
        }
        out
    };
    let out = prefix_suffix_scan(&elements, &combine, &identity_element(n))?;
    let eff_t_len = elements.len() * 2;

    // Effective-time u weights; map to output time (shift down by one when padded).
    let mut log_w = vec![vec![f64::NEG_INFINITY; n]; t_len];
    let mut store = |u_eff: usize, col: Vec<f64>| {
        let t_out = if padded { u_eff.checked_sub(1) } else { Some(u_eff) };
        if let Some(t) = t_out {
            log_w[t] = col;
        }
    };

    // Contracted extraction: for each adjacent pair (prefix[s], suffix[s+1]),
    // l aggregates paths into time 2s+1, r aggregates paths out of time 2s+2,
    // and c = l (x) K_{2s+2} (x) r resolves both interior columns.
    for s in 0..elements.len() - 1 {
        let b = &out.prefix[s];
        let bh = &out.suffix[s + 1];
        let head = LogMat::from_raw(1, n, b.first.row_raw(0).to_vec())?;
        let l = head.log_matmul(&b.second)?;
        let r: Vec<f64> = bh.second.row_logsumexp().iter().map(|v| v.get()).collect();
        let mid = &bh.first;
        let mut c = vec![f64::NEG_INFINITY; n * n];
        for i in 0..n {
            let li = l.get(0, i).get();
            for j in 0..n {
                c[i * n + j] = li + mid.get(i, j).get() + r[j];
            }
        }
        let odd_col: Vec<f64> = (0..n).map(|i| lse_raw(&c[i * n..(i + 1) * n])).collect();
        let mut even_col = vec![f64::NEG_INFINITY; n];
        let mut buf = vec![f64::NEG_INFINITY; n];
        for (j, slot) in even_col.iter_mut().enumerate() {
            for i in 0..n {
                buf[i] = c[i * n + j];
            }
            *slot = lse_raw(&buf);
        }
        store(2 * s + 1, odd_col);
        store(2 * s + 2, even_col);
    }

    // Boundary columns from the full suffix (never produced by the pair loop).
    let head0 = out.prefix[0].first.row_raw(0);
    let tail = &out.suffix[0].second;
    if !padded {
        let mut w0 = vec![f64::NEG_INFINITY; n];
        for (i, slot) in w0.iter_mut().enumerate() {
            *slot = head0[i] + lse_raw(tail.row_raw(i));
        }
        store(0, w0);
    }
    let mut w_last = vec![f64::NEG_INFINITY; n];
    let mut buf = vec![f64::NEG_INFINITY; n];
    for (j, slot) in w_last.iter_mut().enumerate() {
        for i in 0..n {
            buf[i] = head0[i] + tail.get(i, j).get();
        }
        *slot = lse_raw(&buf);
    }
    store(eff_t_len - 1, w_last);

    if padded {
        let ln_n = (n as f64).ln();
        for col in log_w.iter_mut() {
            for w in col.iter_mut() {
                *w -= ln_n;
            }
        }
    }

    let total = lse_raw(&log_w[0]);
    Ok(WeightScan { log_w, log_l_hat_raw: LogValue::new(total)?, plan: out.plan })
}

/// Particle grid, per-column-normalised marginal log-weights, and
/// `log L_hat = log_l_hat_raw - (T+1) log N`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingResult {
    pub particles: ParticleGrid,
    /// `log_w[t][n]`, each column log-sum-exps to zero.
    pub log_w: Vec<Vec<f64>>,
    pub log_l_hat: LogValue,
}

/// Full smoothing pipeline: sample, build kernels, run the weight scan,
/// normalise.
pub fn pvmc_smooth(
    ssm: &impl Ssm,
    prop: &Proposal,
    obs: &ObservationSequence,
    n: usize,
    rng: &mut SeedStream,
) -> Result<SmoothingResult, PvmcError> {
    if n == 0 {
        return Err(PvmcError::NoParticles);
    }
    let grid = sample_proposal(prop, obs, n, rng)?;
    let kernels = compute_kernels(ssm, &grid, obs)?;
    smooth_from_kernels(grid, &kernels)
}

/// Smoothing of a pre-sampled Markovian-proposal grid.
pub fn pvmc_smooth_markov(
    ssm: &impl Ssm,
    mprop: &MarkovProposal,
    obs: &ObservationSequence,
    n: usize,
    rng: &mut SeedStream,
) -> Result<SmoothingResult, PvmcError> {
    if n == 0 {
        return Err(PvmcError::NoParticles);
    }
    let grid = sample_markov_proposal(mprop, obs, n, rng)?;
    let kernels = markovian_kernels(ssm, mprop, &grid, obs)?;
    smooth_from_kernels(grid, &kernels)
}

pub fn smooth_from_kernels(
    grid: ParticleGrid,
    kernels: &KernelTensor,
) -> Result<SmoothingResult, PvmcError> {
    let n = kernels.n_particles();
    let t_len = kernels.t_len();
    let ws = pvmc_weights(kernels)?;
    let log_l_hat =
        LogValue::new(ws.log_l_hat_raw.get() - t_len as f64 * (n as f64).ln())?;
    let mut log_w = ws.log_w;
    for col in log_w.iter_mut() {
        let total = lse_raw(col);
        for w in col.iter_mut() {
            *w -= total;
        }
    }
    Ok(SmoothingResult { particles: grid, log_w, log_l_hat })
}

/// `log L_hat_raw` by a sequential forward pass (reference route for
/// gradients and finite-difference probes; O(T N^2) instead of the scan).
pub fn log_l_hat_raw_forward(kernels: &KernelTensor) -> f64 {
    let n = kernels.n_particles();
    let mut alpha: Vec<f64> = kernels.slab(0).row_raw(0).to_vec();
    let mut buf = vec![f64::NEG_INFINITY; n];
    for t in 1..kernels.t_len() {
        let slab = kernels.slab(t);
        let mut next = vec![f64::NEG_INFINITY; n];
        for (j, slot) in next.iter_mut().enumerate() {
            for i in 0..n {
                buf[i] = alpha[i] + slab.get(i, j).get();
            }
            *slot = lse_raw(&buf);
        }
        alpha = next;
    }
    lse_raw(&alpha)
}

/// `log L_hat` through the cheaper parallel-reduce route: reduce the slabs
/// under the log matrix product, read off the first row, normalise by
/// `N^(T+1)`. Agrees with the scan route on identical particles.
pub fn log_likelihood(
    ssm: &impl Ssm,
    prop: &Proposal,
    obs: &ObservationSequence,
    n: usize,
    rng: &mut SeedStream,
) -> Result<LogValue, PvmcError> {
    if n == 0 {
        return Err(PvmcError::NoParticles);
    }
    let grid = sample_proposal(prop, obs, n, rng)?;
    let kernels = compute_kernels(ssm, &grid, obs)?;
    log_likelihood_from_kernels(&kernels)
}

pub fn log_likelihood_from_kernels(kernels: &KernelTensor) -> Result<LogValue, PvmcError> {
    let n = kernels.n_particles();
    let slabs: Vec<LogMat> = kernels.slabs.clone();
    let combine = |a: &LogMat, b: &LogMat| a.log_matmul(b).expect("slabs are square");
    let product = parallel_reduce(&slabs, &combine)?;
    let raw = lse_raw(product.row_raw(0));
    Ok(LogValue::new(raw - kernels.t_len() as f64 * (n as f64).ln())?)
}

/// Posterior expectation `sum_n w_t^n f(X_t^n)` at one time step.
pub fn posterior_expectation(
    result: &SmoothingResult,
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    t: usize,
) -> Result<DVector<f64>, PvmcError> {
    if t >= result.log_w.len() {
        return Err(PvmcError::TimeOutOfRange { t, t_max: result.log_w.len() - 1 });
    }
    let mut acc: Option<DVector<f64>> = None;
    for (n, x) in result.particles.states[t].iter().enumerate() {
        let term = f(x) * result.log_w[t][n].exp();
        acc = Some(match acc {
            Some(a) => a + term,
            None => term,
        });
    }
    Ok(acc.expect("at least one particle"))
}

/// Smoothing expectation of a multiplicative functional
/// `f_0(x_0) prod_t f_t(x_t, x_{t-1})` through a single parallel reduce of
/// factor-modified slabs. Returns `log ((1/N^(T+1)) sum_trajectories
/// prod_t K_t f_t)`; with unit factors this is `log L_hat`.
pub fn multiplicative_expectation(
    kernels: &KernelTensor,
    grid: &ParticleGrid,
    log_f0: impl Fn(&DVector<f64>) -> f64,
    log_ft: impl Fn(usize, &DVector<f64>, &DVector<f64>) -> f64,
) -> Result<LogValue, PvmcError> {
    let n = kernels.n_particles();
    let t_len = kernels.t_len();
    let mut slabs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let src = kernels.slab(t);
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let factor = if t == 0 {
                    log_f0(&grid.states[0][j])
                } else {
                    log_ft(t, &grid.states[t][j], &grid.states[t - 1][i])
                };
                data.push(src.get(i, j).get() + factor);
            }
        }
        slabs.push(LogMat::from_raw(n, n, data)?);
    }
    let combine = |a: &LogMat, b: &LogMat| a.log_matmul(b).expect("slabs are square");
    let product = parallel_reduce(&slabs, &combine)?;
    let raw = lse_raw(product.row_raw(0));
    Ok(LogValue::new(raw - t_len as f64 * (n as f64).ln())?)
}

/// Single-realisation evidence-lower-bound estimates sharing one kernel
/// tensor (hence one particle grid).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimates {
    /// `log L_hat` from the full trajectory mixture.
    pub pvmc: f64,
    /// `log (1/N) sum_n` over diagonal trajectories.
    pub iwae: f64,
    /// Mean of `log prod K` over all index tuples, in closed form as the sum
    /// of per-slab entry means.
    pub pvae: f64,
    /// Mean of `log prod K` over diagonal trajectories.
    pub vae: f64,
}

pub fn elbo_estimates(kernels: &KernelTensor) -> Result<ElboEstimates, PvmcError> {
    let n = kernels.n_particles();
    let t_len = kernels.t_len();
    let ln_n = (n as f64).ln();
    let norm = t_len as f64 * ln_n;

    let ws = pvmc_weights(kernels)?;
    let pvmc = ws.log_l_hat_raw.get() - norm;

    let diag: Vec<f64> = (0..n)
        .map(|p| {
            let mut acc = kernels.slab(0).get(0, p).get();
            for t in 1..t_len {
                acc += kernels.slab(t).get(p, p).get();
            }
            acc
        })
        .collect();
    let iwae = lse_raw(&diag) - ln_n;
    let vae = diag.iter().sum::<f64>() / n as f64;

    // Every tuple visits slab 0 through one column and each later slab
    // through one (row, column) pair uniformly, so the tuple mean of
    // log prod K collapses to per-slab entry means.
    let mut pvae = kernels.slab(0).row_raw(0).iter().sum::<f64>() / n as f64;
    for t in 1..t_len {
        pvae += kernels.slab(t).raw().iter().sum::<f64>() / (n * n) as f64;
    }

    Ok(ElboEstimates { pvmc, iwae, pvae, vae })
}
