//! Dense linear algebra, activations, RMSprop, dropout, seeded randomness and
//! a central-difference gradient checker.
//!
//! Everything here works on 64-bit reals. Vectors are plain slices; weight
//! tensors are row-major [`Matrix`] values.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: data.len(),
                right: rows * cols,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::LengthMismatch {
                    left: r.len(),
                    right: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Matrix with entries drawn uniformly from `[-scale, scale)`.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform_range(-scale, scale))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of column `c`.
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out = self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `out += self · x`
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ · y`
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
    }

    /// `self += a ⊗ b` (outer product, `a` indexes rows).
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            for (x, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|x| *x *= k);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(sigmoid(x))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    SoftmaxRows,
}

pub fn activations(x: &Matrix, kind: Activation) -> Matrix {
    match kind {
        Activation::Sigmoid => x.map(sigmoid),
        Activation::Tanh => x.map(f64::tanh),
        Activation::SoftmaxRows => {
            let mut out = x.clone();
            for r in 0..out.rows() {
                softmax_in_place(out.row_mut(r));
            }
            out
        }
    }
}

/// Softmax with max subtraction.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// `log Σ exp(v)` with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Seeded random stream. Identical seeds give identical streams.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; advances `self` by one draw.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Uncentered RMSprop accumulator for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub mean_square: Matrix,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl RmsPropState {
    pub fn new(rows: usize, cols: usize, learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        RmsPropState {
            mean_square: Matrix::zeros(rows, cols),
            learning_rate,
            decay,
            epsilon,
        }
    }

    pub fn for_tensor(m: &Matrix, learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        Self::new(m.rows(), m.cols(), learning_rate, decay, epsilon)
    }

    /// `ms ← ρ·ms + (1−ρ)·g²; p ← p − η·g/√(ms+ε)`.
    pub fn step(&mut self, params: &mut Matrix, grads: &Matrix) -> Result<()> {
        if params.shape() != grads.shape() || params.shape() != self.mean_square.shape() {
            return Err(Error::InvalidArgument(format!(
                "rmsprop shape mismatch: params {:?}, grads {:?}, state {:?}",
                params.shape(),
                grads.shape(),
                self.mean_square.shape()
            )));
        }
        if !grads.is_finite() {
            return Err(Error::GradientBlowUp("rmsprop input".into()));
        }
        let (rho, eta, eps) = (self.decay, self.learning_rate, self.epsilon);
        for ((p, &g), ms) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(self.mean_square.as_mut_slice())
        {
            *ms = rho * *ms + (1.0 - rho) * g * g;
            *p -= eta * g / (*ms + eps).sqrt();
        }
        Ok(())
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1−rate)`.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Matrix {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if rate == 0.0 {
        let mut m = Matrix::zeros(rows, cols);
        m.fill(1.0);
        return m;
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Matrix { rows, cols, data }
}

/// Rescales the tensors in place so that their joint L2 norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_global_norm(tensors: &mut [&mut Matrix], threshold: f64) -> f64 {
    let norm = tensors.iter().map(|t| t.sum_squares()).sum::<f64>().sqrt();
    if norm > threshold && norm > 0.0 {
        let k = threshold / norm;
        tensors.iter_mut().for_each(|t| t.scale(k));
    }
    norm
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between `analytic_grad` and central differences of
/// `f` around `x` with step `h`.
pub fn grad_check(
    mut f: impl FnMut(&Matrix) -> f64,
    x: &Matrix,
    analytic_grad: &Matrix,
    h: f64,
) -> f64 {
    assert_eq!(x.shape(), analytic_grad.shape());
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let plus = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let minus = f(&probe);
        probe.as_mut_slice()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic_grad.as_slice()[i], numeric));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use super::Rng;
    use rand::RngCore;

    #[test]
    fn activation_fixed_points() {
        let z = Matrix::zeros(1, 2);
        assert_eq!(activations(&z, Activation::Sigmoid).as_slice(), &[0.5, 0.5]);
        assert_eq!(activations(&z, Activation::Tanh).as_slice(), &[0.0, 0.0]);
        assert_eq!(
            activations(&z, Activation::SoftmaxRows).as_slice(),
            &[0.5, 0.5]
        );
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1e3), 1.0);
        assert_eq!(sigmoid(-1e3), 0.0);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_abs_diff_eq!(log_sigmoid(0.0), -(2f64.ln()), epsilon = 1e-15);
    }

    #[test]
    fn rmsprop_single_scalar_step() {
        let mut p = Matrix::zeros(1, 1);
        let g = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut st = RmsPropState::for_tensor(&p, 0.01, 0.9, 1e-6);
        st.step(&mut p, &g).unwrap();
        // hand oracle: ms = 0.1, delta = -0.01 / sqrt(0.1 + 1e-6)
        let expected = -0.01 / (0.1f64 + 1e-6).sqrt();
        assert_abs_diff_eq!(p.get(0, 0), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(p.get(0, 0), -0.0316226, epsilon = 1e-6);
        assert_abs_diff_eq!(st.mean_square.get(0, 0), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn rmsprop_rejects_non_finite_gradient() {
        let mut p = Matrix::zeros(1, 2);
        let g = Matrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        let mut st = RmsPropState::for_tensor(&p, 0.01, 0.9, 1e-6);
        assert!(matches!(st.step(&mut p, &g), Err(Error::GradientBlowUp(_))));
    }

    #[test]
    fn dropout_zero_rate_is_all_ones() {
        let mut rng = Rng::new(1);
        let m = dropout_mask(3, 4, 0.0, &mut rng);
        assert!(m.as_slice().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn dropout_half_rate_frequency() {
        let mut rng = Rng::new(7);
        let m = dropout_mask(1000, 1000, 0.5, &mut rng);
        let zeros = m.as_slice().iter().filter(|&&x| x == 0.0).count() as f64;
        let frac = zeros / 1e6;
        assert!((frac - 0.5).abs() < 0.01, "zero fraction {frac}");
        assert!(m.as_slice().iter().all(|&x| x == 0.0 || x == 2.0));
    }

    #[test]
    fn seeded_streams_repeat() {
        let a = dropout_mask(10, 10, 0.3, &mut Rng::new(99));
        let b = dropout_mask(10, 10, 0.3, &mut Rng::new(99));
        assert_eq!(a, b);
        let mut r1 = Rng::new(5);
        let mut r2 = Rng::new(5);
        let xs: Vec<u64> = (0..8).map(|_| r1.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| r2.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn grad_check_quadratic() {
        let x = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![6.0]).unwrap();
        let err = grad_check(|m| m.get(0, 0).powi(2), &x, &g, 1e-4);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_detects_doubled_gradient() {
        let x = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        let g = Matrix::from_vec(1, 1, vec![12.0]).unwrap();
        let err = grad_check(|m| m.get(0, 0).powi(2), &x, &g, 1e-4);
        assert_abs_diff_eq!(err, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn clip_scales_down_only_above_threshold() {
        let mut a = Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap();
        let norm = clip_global_norm(&mut [&mut a], 5.0);
        assert_eq!(norm, 5.0);
        assert_eq!(a.as_slice(), &[3.0, 4.0]);
        let mut b = Matrix::from_vec(1, 2, vec![6.0, 8.0]).unwrap();
        clip_global_norm(&mut [&mut b], 5.0);
        assert_abs_diff_eq!(b.as_slice()[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn matvec_transpose_agrees_with_explicit_transpose() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let mut out = vec![0.0; 3];
        m.matvec_t_acc(&[1.0, -1.0], &mut out);
        assert_eq!(out, vec![-3.0, -3.0, -3.0]);
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(v in proptest::collection::vec(-50.0f64..50.0, 1..20)) {
            let m = Matrix::from_vec(1, v.len(), v).unwrap();
            let s = activations(&m, Activation::SoftmaxRows);
            let total: f64 = s.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(s.as_slice().iter().all(|&p| p > 0.0));
        }

        #[test]
        fn rmsprop_zero_gradient_is_identity(v in proptest::collection::vec(-5.0f64..5.0, 1..10)) {
            let mut p = Matrix::from_vec(1, v.len(), v.clone()).unwrap();
            let g = Matrix::zeros(1, v.len());
            let mut st = RmsPropState::for_tensor(&p, 0.01, 0.9, 1e-6);
            st.step(&mut p, &g).unwrap();
            prop_assert_eq!(p.as_slice(), &v[..]);
        }
    }
}
