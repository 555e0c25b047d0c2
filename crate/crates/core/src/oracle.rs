//! Brute-force trajectory enumeration.
//!
//! Ground-truth reference for the scan-based weight recursion: every one of
//! the `N^(T+1)` index tuples is expanded explicitly and the marginal weights
//! are regrouped sums of the same table. Guarded to small instances.

use thiserror::Error;

use crate::logspace::{lse_raw, LogValue};
use crate::pvmc::KernelTensor;

pub const MAX_TRAJECTORIES: u128 = 10_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("N^(T+1) = {count} exceeds the enumeration guard {MAX_TRAJECTORIES}")]
    TooManyTrajectories { count: u128 },
}

/// Log-weight of every trajectory, indexed by the little-endian mixed-radix
/// tuple `(n_0, ..., n_T)` with `n_0` the fastest-varying digit.
#[derive(Debug, Clone)]
pub struct TrajectoryWeightTable {
    pub n_particles: usize,
    pub t_len: usize,
    pub log_weights: Vec<f64>,
}

impl TrajectoryWeightTable {
    /// Decode entry `idx` into its index tuple.
    pub fn tuple(&self, mut idx: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.t_len);
        for _ in 0..self.t_len {
            out.push(idx % self.n_particles);
            idx /= self.n_particles;
        }
        out
    }
}

/// Expand `sum_t log K_t[n_{t-1}][n_t]` for every index tuple.
pub fn enumerate_trajectory_weights(
    kernels: &KernelTensor,
) -> Result<TrajectoryWeightTable, OracleError> {
    let n = kernels.n_particles();
    let t_len = kernels.t_len();
    let count = (n as u128).pow(t_len as u32);
    if count > MAX_TRAJECTORIES {
        return Err(OracleError::TooManyTrajectories { count });
    }
    let total = count as usize;
    let mut log_weights = vec![0.0f64; total];
    for (idx, w) in log_weights.iter_mut().enumerate() {
        let mut rem = idx;
        let n0 = rem % n;
        rem /= n;
        // Slab-0 rows are identical; row 0 is as good as any.
        let mut acc = kernels.slab(0).get(0, n0).get();
        let mut prev = n0;
        for t in 1..t_len {
            let nt = rem % n;
            rem /= n;
            acc += kernels.slab(t).get(prev, nt).get();
            prev = nt;
        }
        *w = acc;
    }
    Ok(TrajectoryWeightTable { n_particles: n, t_len, log_weights })
}

/// Marginal weights by regrouping the table: `W_t^i` log-sums every tuple
/// with `n_t = i`; the raw likelihood log-sums everything.
pub fn brute_force_marginals(table: &TrajectoryWeightTable) -> (Vec<Vec<f64>>, LogValue) {
    let n = table.n_particles;
    let t_len = table.t_len;
    let mut by_index: Vec<Vec<Vec<f64>>> =
        vec![vec![Vec::with_capacity(table.log_weights.len() / n); n]; t_len];
    let mut stride = 1usize;
    let strides: Vec<usize> = (0..t_len)
        .map(|_| {
            let s = stride;
            stride *= n;
            s
        })
        .collect();
    for (idx, w) in table.log_weights.iter().enumerate() {
        for t in 0..t_len {
            let digit = (idx / strides[t]) % n;
            by_index[t][digit].push(*w);
        }
    }
    let log_w: Vec<Vec<f64>> = by_index
        .into_iter()
        .map(|cols| cols.into_iter().map(|vals| lse_raw(&vals)).collect())
        .collect();
    let total = lse_raw(&table.log_weights);
    (log_w, LogValue::new(total).expect("finite or -inf total"))
}
