//! Log-domain scalars and dense matrices.
//!
//! Every probability magnitude in this crate (densities, kernel ratios,
//! likelihood estimates) lives in logarithmic representation so that products
//! over hundreds of time steps cannot underflow. A value of negative infinity
//! encodes probability zero; positive infinity and NaN are rejected at every
//! construction boundary.

use num_traits::Float;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogspaceError {
    #[error("log_sum_exp of an empty sequence")]
    EmptySequence,
    #[error("log-domain value must not be NaN or +inf")]
    InvalidValue,
    #[error("dimension mismatch: left is {lr}x{lc}, right is {rr}x{rc}")]
    DimensionMismatch { lr: usize, lc: usize, rr: usize, rc: usize },
    #[error("entry count {len} does not match shape {rows}x{cols}")]
    ShapeMismatch { len: usize, rows: usize, cols: usize },
}

/// A log-domain probability magnitude: `exp(self)` is the linear-domain value.
///
/// Negative infinity is allowed (probability zero); NaN and positive infinity
/// are not representable through the public constructors.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogScalar<F>(F);

impl<F: Float> LogScalar<F> {
    pub fn new(v: F) -> Result<Self, LogspaceError> {
        if v.is_nan() || (v.is_infinite() && v > F::zero()) {
            return Err(LogspaceError::InvalidValue);
        }
        Ok(LogScalar(v))
    }

    /// log 0, the zero-probability element.
    pub fn zero_prob() -> Self {
        LogScalar(F::neg_infinity())
    }

    /// log 1.
    pub fn one_prob() -> Self {
        LogScalar(F::zero())
    }

    pub fn get(self) -> F {
        self.0
    }

    pub fn is_zero_prob(self) -> bool {
        self.0.is_infinite()
    }

    pub(crate) fn from_raw(v: F) -> Self {
        debug_assert!(!v.is_nan() && !(v.is_infinite() && v > F::zero()));
        LogScalar(v)
    }
}

impl<F: Float> std::ops::Add for LogScalar<F> {
    type Output = LogScalar<F>;

    /// Log-domain product of probabilities.
    fn add(self, rhs: Self) -> Self {
        LogScalar::from_raw(self.0 + rhs.0)
    }
}

impl<F: Float> std::ops::Sub for LogScalar<F> {
    type Output = LogScalar<F>;

    /// Log-domain ratio. The divisor must be nonzero probability.
    fn sub(self, rhs: Self) -> Self {
        debug_assert!(!rhs.0.is_infinite(), "division by zero probability");
        LogScalar::from_raw(self.0 - rhs.0)
    }
}

/// Max-shifted `log(sum(exp(v)))` over raw log-domain floats.
///
/// Returns -inf iff all inputs are -inf; the shift guarantees no overflow.
pub(crate) fn lse_raw<F: Float>(values: &[F]) -> F {
    debug_assert!(!values.is_empty());
    let mut m = F::neg_infinity();
    for &v in values {
        if v > m {
            m = v;
        }
    }
    if m.is_infinite() {
        // All inputs are -inf; avoid -inf - -inf below.
        return F::neg_infinity();
    }
    let mut acc = F::zero();
    for &v in values {
        acc = acc + (v - m).exp();
    }
    m + acc.ln()
}

/// `log(sum_i(exp(v_i)))` of a non-empty sequence of log-domain values.
pub fn log_sum_exp<F: Float>(values: &[LogScalar<F>]) -> Result<LogScalar<F>, LogspaceError> {
    if values.is_empty() {
        return Err(LogspaceError::EmptySequence);
    }
    let mut m = F::neg_infinity();
    for v in values {
        if v.0 > m {
            m = v.0;
        }
    }
    if m.is_infinite() {
        return Ok(LogScalar::zero_prob());
    }
    let mut acc = F::zero();
    for v in values {
        acc = acc + (v.0 - m).exp();
    }
    Ok(LogScalar::from_raw(m + acc.ln()))
}

/// Dense row-major matrix of log-domain values.
///
/// The log-identity has 0 on the diagonal and -inf off it, so that
/// [`LogMatrix::log_matmul`] realises ordinary matrix multiplication of the
/// exponentiated matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMatrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Float + Send + Sync> LogMatrix<F> {
    pub fn from_raw(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, LogspaceError> {
        if data.len() != rows * cols {
            return Err(LogspaceError::ShapeMismatch { len: data.len(), rows, cols });
        }
        if data.iter().any(|v| v.is_nan() || (v.is_infinite() && *v > F::zero())) {
            return Err(LogspaceError::InvalidValue);
        }
        Ok(LogMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> LogScalar<F>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j).get());
            }
        }
        LogMatrix { rows, cols, data }
    }

    /// Log of the identity matrix: 0 on the diagonal, -inf elsewhere.
    pub fn log_identity(n: usize) -> Self {
        let mut data = vec![F::neg_infinity(); n * n];
        for i in 0..n {
            data[i * n + i] = F::zero();
        }
        LogMatrix { rows: n, cols: n, data }
    }

    /// Log of the all-ones matrix: 0 everywhere.
    pub fn log_ones(rows: usize, cols: usize) -> Self {
        LogMatrix { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> LogScalar<F> {
        LogScalar::from_raw(self.data[i * self.cols + j])
    }

    pub fn set(&mut self, i: usize, j: usize, v: LogScalar<F>) {
        self.data[i * self.cols + j] = v.get();
    }

    pub(crate) fn raw(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub(crate) fn row_raw(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Leading `r`x`c` sub-matrix.
    pub fn leading(&self, r: usize, c: usize) -> Self {
        assert!(r <= self.rows && c <= self.cols);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * self.cols..i * self.cols + c]);
        }
        LogMatrix { rows: r, cols: c, data }
    }

    /// `log(exp(self) * exp(rhs))` entrywise-exact up to one rounding:
    /// `C[i][j] = log sum_l exp(A[i][l] + B[l][j])`.
    ///
    /// Rows of `A` and columns of `B` are max-shifted before exponentiation so
    /// the inner loop is a plain matrix product; a row or column whose maximum
    /// is -inf yields -inf outputs without touching `-inf - -inf`.
    pub fn log_matmul(&self, rhs: &Self) -> Result<Self, LogspaceError> {
        if self.cols != rhs.rows {
            return Err(LogspaceError::DimensionMismatch {
                lr: self.rows,
                lc: self.cols,
                rr: rhs.rows,
                rc: rhs.cols,
            });
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);

        let row_max: Vec<F> = (0..m)
            .map(|i| {
                let mut mx = F::neg_infinity();
                for &v in self.row_raw(i) {
                    if v > mx {
                        mx = v;
                    }
                }
                mx
            })
            .collect();
        let mut col_max = vec![F::neg_infinity(); n];
        for l in 0..k {
            let row = rhs.row_raw(l);
            for (j, &v) in row.iter().enumerate() {
                if v > col_max[j] {
                    col_max[j] = v;
                }
            }
        }

        let ea: Vec<F> = (0..m)
            .flat_map(|i| {
                let mx = row_max[i];
                self.row_raw(i).iter().map(move |&v| {
                    if mx.is_infinite() {
                        F::zero()
                    } else {
                        (v - mx).exp()
                    }
                })
            })
            .collect();
        let mut eb = vec![F::zero(); k * n];
        for l in 0..k {
            let row = rhs.row_raw(l);
            for j in 0..n {
                if !col_max[j].is_infinite() {
                    eb[l * n + j] = (row[j] - col_max[j]).exp();
                }
            }
        }

        let mut out = vec![F::neg_infinity(); m * n];
        let body = |(i, out_row): (usize, &mut [F])| {
            if row_max[i].is_infinite() {
                return;
            }
            let mut acc = vec![F::zero(); n];
            for l in 0..k {
                let a = ea[i * k + l];
                if a == F::zero() {
                    continue;
                }
                let brow = &eb[l * n..(l + 1) * n];
                for (s, &b) in acc.iter_mut().zip(brow.iter()) {
                    *s = *s + a * b;
                }
            }
            for j in 0..n {
                if !col_max[j].is_infinite() {
                    out_row[j] = acc[j].ln() + row_max[i] + col_max[j];
                }
            }
        };
        if m * n * k >= 32_768 {
            out.par_chunks_mut(n).enumerate().for_each(body);
        } else {
            out.chunks_mut(n).enumerate().for_each(body);
        }
        Ok(LogMatrix { rows: m, cols: n, data: out })
    }

    /// Per-row `log_sum_exp`.
    pub fn row_logsumexp(&self) -> Vec<LogScalar<F>> {
        (0..self.rows)
            .map(|i| LogScalar::from_raw(lse_raw(self.row_raw(i))))
            .collect()
    }

    /// Per-column `log_sum_exp`.
    pub fn col_logsumexp(&self) -> Vec<LogScalar<F>> {
        let mut cols = vec![LogScalar::zero_prob(); self.cols];
        let mut buf = vec![F::neg_infinity(); self.rows];
        for (j, slot) in cols.iter_mut().enumerate() {
            for i in 0..self.rows {
                buf[i] = self.data[i * self.cols + j];
            }
            *slot = LogScalar::from_raw(lse_raw(&buf));
        }
        cols
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        let mut worst = F::zero();
        for (a, b) in self.data.iter().zip(other.data.iter()) {
            let d = if a.is_infinite() && b.is_infinite() {
                F::zero()
            } else {
                (*a - *b).abs()
            };
            if d > worst {
                worst = d;
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    type L = LogScalar<f64>;
    type M = LogMatrix<f64>;

    fn lv(v: f64) -> L {
        L::new(v).unwrap()
    }

    #[test]
    fn lse_all_zero_probability() {
        let out = log_sum_exp(&[L::zero_prob(), L::zero_prob()]).unwrap();
        assert!(out.is_zero_prob());
    }

    #[test]
    fn lse_singleton_is_identity() {
        for x in [-700.0, -3.25, 0.0, 14.5] {
            assert_eq!(log_sum_exp(&[lv(x)]).unwrap().get(), x);
        }
    }

    #[test]
    fn lse_matches_linear_domain_sum() {
        // log 1 + log 3 summed in probability space is log 4.
        let out = log_sum_exp(&[lv(0.0), lv(3.0_f64.ln())]).unwrap();
        assert!((out.get() - 4.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn lse_empty_is_error() {
        assert_eq!(log_sum_exp::<f64>(&[]), Err(LogspaceError::EmptySequence));
    }

    #[test]
    fn scalar_rejects_nan_and_plus_inf() {
        assert!(L::new(f64::NAN).is_err());
        assert!(L::new(f64::INFINITY).is_err());
        assert!(L::new(f64::NEG_INFINITY).is_ok());
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a = M::from_fn(3, 3, |i, j| lv(-0.3 * (i as f64) - 1.7 * (j as f64) - 0.1));
        let c = a.log_matmul(&M::log_identity(3)).unwrap();
        assert_eq!(a, c);
        let c2 = M::log_identity(3).log_matmul(&a).unwrap();
        assert_eq!(a, c2);
    }

    #[test]
    fn matmul_scalar_case_is_log_addition() {
        let a = M::from_raw(1, 1, vec![-1.25]).unwrap();
        let b = M::from_raw(1, 1, vec![-2.5]).unwrap();
        let c = a.log_matmul(&b).unwrap();
        assert!((c.get(0, 0).get() - (-3.75)).abs() < 1e-15);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = M::log_ones(2, 3);
        let b = M::log_ones(2, 2);
        assert!(matches!(a.log_matmul(&b), Err(LogspaceError::DimensionMismatch { .. })));
    }

    #[test]
    fn matmul_zero_probability_rows_stay_zero() {
        let mut a = M::log_ones(2, 2);
        a.set(0, 0, L::zero_prob());
        a.set(0, 1, L::zero_prob());
        let b = M::log_ones(2, 2);
        let c = a.log_matmul(&b).unwrap();
        assert!(c.get(0, 0).is_zero_prob());
        assert!(c.get(0, 1).is_zero_prob());
        assert!((c.get(1, 0).get() - 2.0_f64.ln()).abs() < 1e-15);
    }

    fn linear_matmul_oracle(a: &M, b: &M) -> Vec<f64> {
        // Brute-force product in the probability domain.
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.get(i, l).get().exp() * b.get(l, j).get().exp();
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matmul_matches_linear_domain(vals_a in proptest::collection::vec(-3.0f64..0.0, 4),
                                        vals_b in proptest::collection::vec(-3.0f64..0.0, 4)) {
            let a = M::from_raw(2, 2, vals_a).unwrap();
            let b = M::from_raw(2, 2, vals_b).unwrap();
            let c = a.log_matmul(&b).unwrap();
            let oracle = linear_matmul_oracle(&a, &b);
            for i in 0..2 {
                for j in 0..2 {
                    let got = c.get(i, j).get().exp();
                    let want = oracle[i * 2 + j];
                    prop_assert!((got - want).abs() / want.abs() < 1e-12);
                }
            }
        }

        #[test]
        fn matmul_is_associative(vals in proptest::collection::vec(-700.0f64..0.0, 27)) {
            let a = M::from_raw(3, 3, vals[0..9].to_vec()).unwrap();
            let b = M::from_raw(3, 3, vals[9..18].to_vec()).unwrap();
            let c = M::from_raw(3, 3, vals[18..27].to_vec()).unwrap();
            let left = a.log_matmul(&b).unwrap().log_matmul(&c).unwrap();
            let right = a.log_matmul(&b.log_matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) <= 1e-9);
        }

        #[test]
        fn matmul_is_monotone(vals_a in proptest::collection::vec(-3.0f64..0.0, 9),
                              vals_b in proptest::collection::vec(-3.0f64..0.0, 9),
                              idx in 0usize..9, bump in 0.01f64..2.0) {
            let a = M::from_raw(3, 3, vals_a.clone()).unwrap();
            let mut bumped = vals_a;
            bumped[idx] += bump;
            let a2 = M::from_raw(3, 3, bumped).unwrap();
            let b = M::from_raw(3, 3, vals_b).unwrap();
            let c = a.log_matmul(&b).unwrap();
            let c2 = a2.log_matmul(&b).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!(c2.get(i, j).get() >= c.get(i, j).get());
                }
            }
        }

        #[test]
        fn matmul_never_produces_nan_or_plus_inf(vals_a in proptest::collection::vec(prop_oneof![4 => -700.0f64..0.0, 1 => Just(f64::NEG_INFINITY)], 9),
                                                 vals_b in proptest::collection::vec(prop_oneof![4 => -700.0f64..0.0, 1 => Just(f64::NEG_INFINITY)], 9)) {
            let a = M::from_raw(3, 3, vals_a).unwrap();
            let b = M::from_raw(3, 3, vals_b).unwrap();
            let c = a.log_matmul(&b).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let v = c.get(i, j).get();
                    prop_assert!(!v.is_nan());
                    prop_assert!(!(v.is_infinite() && v > 0.0));
                }
            }
        }
    }
}
