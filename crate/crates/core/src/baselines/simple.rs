//! Estimators that ignore the issue entirely.

use crate::corpus::median;
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub fn mean_effort(points: &[f64]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyInput("story points"));
    }
    Ok(points.iter().sum::<f64>() / points.len() as f64)
}

pub fn median_effort(points: &[f64]) -> Result<f64> {
    median(points).ok_or(Error::EmptyInput("story points"))
}

/// Story points of one past issue drawn uniformly.
pub fn random_guess(points: &[f64], rng: &mut Rng) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyInput("story points"));
    }
    Ok(points[rng.below(points.len())])
}
