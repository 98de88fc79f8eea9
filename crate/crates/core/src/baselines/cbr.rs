//! Case-based reasoning: mean story points of the nearest past issues.

use super::check_table;
use crate::error::{Error, Result};

/// Mean target of the `k` rows nearest to `x` in Euclidean distance; equal
/// distances are ordered by row index.
pub fn cbr_estimate(train_x: &[Vec<f64>], train_y: &[f64], x: &[f64], k: usize) -> Result<f64> {
    let p = check_table(train_x, train_y)?;
    if k == 0 || k > train_x.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            train_x.len()
        )));
    }
    if x.len() != p {
        return Err(Error::LengthMismatch { left: p, right: x.len() });
    }
    let mut dist: Vec<(f64, usize)> = train_x
        .iter()
        .enumerate()
        .map(|(i, r)| (r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(dist[..k].iter().map(|&(_, i)| train_y[i]).sum::<f64>() / k as f64)
}
