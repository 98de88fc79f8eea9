//! Comparison estimators.
//!
//! Feature tables are row-major `&[Vec<f64>]`; each row is one issue.

pub mod bow;
pub mod cbr;
pub mod features;
pub mod forest;
pub mod linear;
pub mod simple;
pub mod tree;

pub use bow::bow_vectorize;
pub use cbr::cbr_estimate;
pub use features::{assemble_features, reporter_reputation, FeatureRecord, FeatureVector};
pub use forest::{ForestConfig, RandomForest};
pub use linear::{lasso_fit, lasso_fit_budget, lasso_select, ols_fit, LassoModel, LinearModel};
pub use simple::{mean_effort, median_effort, random_guess};
pub use tree::{RegressionTree, TreeConfig};

use crate::error::{Error, Result};

/// Checks a feature table against its targets; returns the column count.
pub(crate) fn check_table(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::EmptyInput("training rows"));
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let p = x[0].len();
    for row in x {
        if row.len() != p {
            return Err(Error::LengthMismatch {
                left: p,
                right: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature value".into()));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite target".into()));
    }
    Ok(p)
}
