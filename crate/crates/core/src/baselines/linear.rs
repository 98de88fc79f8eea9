//! Least squares and L1-constrained least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::check_table;
use crate::error::{Error, Result};

const RIDGE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn l1_norm(&self) -> f64 {
        self.coefficients.iter().map(|b| b.abs()).sum()
    }
}

fn column_means(x: &[Vec<f64>], p: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..p).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Ordinary least squares via the centered normal equations. A singular
/// Gram matrix is damped with a `1e-8` ridge.
pub fn ols_fit(x: &[Vec<f64>], y: &[f64]) -> Result<LinearModel> {
    let p = check_table(x, y)?;
    let n = x.len();
    let mx = column_means(x, p);
    let my = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, p, |i, j| x[i][j] - mx[j]);
    let yc = DVector::from_fn(n, |i, _| y[i] - my);
    let gram = xc.transpose() * &xc;
    let rhs = xc.transpose() * yc;
    let b = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => (gram + DMatrix::identity(p, p) * RIDGE)
            .cholesky()
            .ok_or_else(|| Error::NumericOverflow("ridge-damped Gram matrix not positive definite".into()))?
            .solve(&rhs),
    };
    let coefficients: Vec<f64> = b.iter().copied().collect();
    let intercept = my - coefficients.iter().zip(&mx).map(|(b, m)| b * m).sum::<f64>();
    Ok(LinearModel {
        intercept,
        coefficients,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Penalty of the solved problem.
    pub lambda: f64,
    /// L1 budget; `Σ|b_j| ≤ budget`.
    pub budget: f64,
    /// Indices of non-zero coefficients.
    pub selected: Vec<usize>,
}

impl LassoModel {
    fn new(intercept: f64, coefficients: Vec<f64>, lambda: f64, budget: f64) -> Self {
        let selected = (0..coefficients.len()).filter(|&j| coefficients[j] != 0.0).collect();
        LassoModel {
            intercept,
            coefficients,
            lambda,
            budget,
            selected,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn l1_norm(&self) -> f64 {
        self.coefficients.iter().map(|b| b.abs()).sum()
    }
}

/// Standardized design with the data needed to map back.
struct Standardized {
    z: Vec<Vec<f64>>, // column-major
    yc: Vec<f64>,
    mean_x: Vec<f64>,
    sd: Vec<f64>,
    mean_y: f64,
}

impl Standardized {
    fn new(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        let p = check_table(x, y)?;
        let n = x.len() as f64;
        let mean_x = column_means(x, p);
        let sd: Vec<f64> = (0..p)
            .map(|j| (x.iter().map(|r| (r[j] - mean_x[j]).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        let z = (0..p)
            .map(|j| {
                x.iter()
                    .map(|r| if sd[j] > 0.0 { (r[j] - mean_x[j]) / sd[j] } else { 0.0 })
                    .collect()
            })
            .collect();
        let mean_y = y.iter().sum::<f64>() / n;
        Ok(Standardized {
            z,
            yc: y.iter().map(|v| v - mean_y).collect(),
            mean_x,
            sd,
            mean_y,
        })
    }

    /// Smallest penalty with an all-zero solution.
    fn lambda_max(&self) -> f64 {
        self.z
            .iter()
            .zip(&self.sd)
            .filter(|(_, &s)| s > 0.0)
            .map(|(zj, s)| zj.iter().zip(&self.yc).map(|(a, b)| a * b).sum::<f64>().abs() * s)
            .fold(0.0, f64::max)
    }

    /// Coordinate descent on `½‖y − Zβ‖² + λ Σ |β_j| / sd_j`, which is the
    /// original-scale penalty `λ Σ |b_j|` written in standardized columns.
    fn solve(&self, lambda: f64) -> Vec<f64> {
        let p = self.z.len();
        let n = self.yc.len() as f64;
        let mut beta = vec![0.0; p];
        let mut resid = self.yc.clone();
        for _ in 0..100_000 {
            let mut max_change: f64 = 0.0;
            for j in 0..p {
                if self.sd[j] == 0.0 {
                    continue;
                }
                let zj = &self.z[j];
                let rho: f64 = zj.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() + n * beta[j];
                let t = lambda / self.sd[j];
                let new = if rho > t {
                    (rho - t) / n
                } else if rho < -t {
                    (rho + t) / n
                } else {
                    0.0
                };
                let delta = new - beta[j];
                if delta != 0.0 {
                    for (r, a) in resid.iter_mut().zip(zj) {
                        *r -= delta * a;
                    }
                    beta[j] = new;
                    max_change = max_change.max(delta.abs() / self.sd[j]);
                }
            }
            if max_change < 1e-13 {
                break;
            }
        }
        beta
    }

    fn destandardize(&self, beta: &[f64]) -> (f64, Vec<f64>) {
        let b: Vec<f64> = beta
            .iter()
            .zip(&self.sd)
            .map(|(bj, &s)| if s > 0.0 { bj / s } else { 0.0 })
            .collect();
        let intercept = self.mean_y - b.iter().zip(&self.mean_x).map(|(c, m)| c * m).sum::<f64>();
        (intercept, b)
    }
}

/// Penalized form: minimizes `½ Σ(y − ŷ)² + λ Σ|b_j|`.
pub fn lasso_fit(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<LassoModel> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {lambda}")));
    }
    let s = Standardized::new(x, y)?;
    let (intercept, b) = s.destandardize(&s.solve(lambda));
    let budget = b.iter().map(|v| v.abs()).sum();
    Ok(LassoModel::new(intercept, b, lambda, budget))
}

/// Constrained form: minimizes `Σ(y − ŷ)²` subject to `Σ|b_j| ≤ budget`,
/// by bisection on the penalty.
pub fn lasso_fit_budget(x: &[Vec<f64>], y: &[f64], budget: f64) -> Result<LassoModel> {
    if !(budget >= 0.0) {
        return Err(Error::InvalidArgument(format!("budget must be >= 0, got {budget}")));
    }
    let s = Standardized::new(x, y)?;
    let p = s.z.len();
    let ols = ols_fit(x, y)?;
    if ols.l1_norm() <= budget {
        let zeroed: Vec<f64> = ols
            .coefficients
            .iter()
            .zip(&s.sd)
            .map(|(&b, &sd)| if sd > 0.0 { b } else { 0.0 })
            .collect();
        let intercept = s.mean_y - zeroed.iter().zip(&s.mean_x).map(|(b, m)| b * m).sum::<f64>();
        return Ok(LassoModel::new(intercept, zeroed, 0.0, budget));
    }
    let (mut lo, mut hi) = (0.0, s.lambda_max());
    let mut best = (hi, s.destandardize(&vec![0.0; p]));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fit = s.destandardize(&s.solve(mid));
        let norm: f64 = fit.1.iter().map(|v| v.abs()).sum();
        if norm <= budget {
            hi = mid;
            best = (mid, fit);
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    let (lambda, (intercept, b)) = best;
    Ok(LassoModel::new(intercept, b, lambda, budget))
}

/// Penalty picked from `lambda_max · ratio^k` by validation MAE.
pub fn lasso_select(
    train_x: &[Vec<f64>],
    train_y: &[f64],
    valid_x: &[Vec<f64>],
    valid_y: &[f64],
    grid_size: usize,
) -> Result<LassoModel> {
    check_table(valid_x, valid_y)?;
    let s = Standardized::new(train_x, train_y)?;
    let top = s.lambda_max();
    let grid_size = grid_size.max(2);
    let ratio: f64 = 1e-3_f64.powf(1.0 / (grid_size - 1) as f64);
    let mut best: Option<(f64, LassoModel)> = None;
    for k in 0..grid_size {
        let m = lasso_fit(train_x, train_y, top * ratio.powi(k as i32))?;
        let mae = valid_x.iter().zip(valid_y).map(|(r, y)| (m.predict(r) - y).abs()).sum::<f64>()
            / valid_y.len() as f64;
        if best.as_ref().is_none_or(|(b, _)| mae < *b) {
            best = Some((mae, m));
        }
    }
    Ok(best.expect("grid is non-empty").1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_instance(seed: u64, n: usize, p: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let truth: Vec<f64> = (0..p).map(|j| if j % 3 == 0 { 0.0 } else { rng.uniform_range(-3.0, 3.0) }).collect();
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).collect();
        let y = x
            .iter()
            .map(|r| 1.5 + r.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + rng.uniform_range(-0.5, 0.5))
            .collect();
        (x, y)
    }

    #[test]
    fn exact_line_is_recovered() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64).collect();
        let m = ols_fit(&x, &y).unwrap();
        assert!((m.coefficients[0] - 2.0).abs() < 1e-9);
        assert!(m.intercept.abs() < 1e-9);
    }

    #[test]
    fn constant_feature_gets_zero_weight() {
        let x = vec![vec![3.0]; 6];
        let y = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        let m = ols_fit(&x, &y).unwrap();
        assert_eq!(m.coefficients[0], 0.0);
        assert!((m.intercept - 4.0).abs() < 1e-12);
    }

    #[test]
    fn matches_normal_equation_oracle() {
        // oracle: solve [1 x1 x2]ᵀ[1 x1 x2] β = [1 x1 x2]ᵀ y by Cramer's rule
        let (x, y) = random_instance(31, 5, 2);
        let rows: Vec<[f64; 3]> = x.iter().map(|r| [1.0, r[0], r[1]]).collect();
        let mut a = [[0.0; 3]; 3];
        let mut c = [0.0; 3];
        for (r, t) in rows.iter().zip(&y) {
            for i in 0..3 {
                c[i] += r[i] * t;
                for j in 0..3 {
                    a[i][j] += r[i] * r[j];
                }
            }
        }
        let det = |m: [[f64; 3]; 3]| {
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        };
        let d = det(a);
        let solve = |k: usize| {
            let mut m = a;
            for i in 0..3 {
                m[i][k] = c[i];
            }
            det(m) / d
        };
        let fit = ols_fit(&x, &y).unwrap();
        assert!((fit.intercept - solve(0)).abs() < 1e-9);
        assert!((fit.coefficients[0] - solve(1)).abs() < 1e-9);
        assert!((fit.coefficients[1] - solve(2)).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_uses_ridge() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..8).map(|i| 5.0 * i as f64 + 1.0).collect();
        let m = ols_fit(&x, &y).unwrap();
        for r in &x {
            assert!((m.predict(r) - (5.0 * r[0] + 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn unbounded_budget_is_least_squares() {
        let (x, y) = random_instance(7, 40, 6);
        let ols = ols_fit(&x, &y).unwrap();
        let lasso = lasso_fit_budget(&x, &y, 1e9).unwrap();
        for (a, b) in lasso.coefficients.iter().zip(&ols.coefficients) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((lasso.intercept - ols.intercept).abs() < 1e-6);
        // the penalized solver at λ = 0 converges to the same point
        let free = lasso_fit(&x, &y, 0.0).unwrap();
        for (a, b) in free.coefficients.iter().zip(&ols.coefficients) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_budget_is_the_mean() {
        let (x, y) = random_instance(8, 30, 5);
        let m = lasso_fit_budget(&x, &y, 0.0).unwrap();
        assert!(m.coefficients.iter().all(|&b| b == 0.0));
        assert!(m.selected.is_empty());
        assert!((m.intercept - y.iter().sum::<f64>() / 30.0).abs() < 1e-12);
    }

    #[test]
    fn budget_is_respected_and_path_is_monotone() {
        let (x, y) = random_instance(9, 60, 8);
        let full = ols_fit(&x, &y).unwrap().l1_norm();
        let mut prev_zeros = usize::MAX;
        let mut prev_norm = -1.0;
        for k in 0..=20 {
            let s = full * k as f64 / 20.0;
            let m = lasso_fit_budget(&x, &y, s).unwrap();
            assert!(m.l1_norm() <= s + 1e-8, "budget {s}: norm {}", m.l1_norm());
            let zeros = m.coefficients.iter().filter(|&&b| b == 0.0).count();
            assert!(zeros <= prev_zeros, "zeros grew at s = {s}");
            assert!(m.l1_norm() >= prev_norm - 1e-9);
            assert_eq!(m.selected.len(), 8 - zeros);
            prev_zeros = zeros;
            prev_norm = m.l1_norm();
        }
        // penalized path: norm is non-increasing in λ
        let mut last = f64::INFINITY;
        for k in 0..30 {
            let m = lasso_fit(&x, &y, k as f64 * 2.0).unwrap();
            assert!(m.l1_norm() <= last + 1e-9);
            last = m.l1_norm();
        }
    }

    #[test]
    fn selection_prefers_a_sparse_truth() {
        let (x, y) = random_instance(10, 80, 9);
        let m = lasso_select(&x[..60], &y[..60], &x[60..], &y[60..], 25).unwrap();
        assert!(m.selected.len() <= 9);
        assert!(m.lambda > 0.0);
    }
}
