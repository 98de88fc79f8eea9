//! Random forest: bagged CART trees with a random feature subset per split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::check_table;
use super::tree::{FeatureSampling, RegressionTree};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means `⌊√p⌋` (at least one).
    pub max_features: Option<usize>,
    pub min_leaf_size: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            bootstrap: true,
            max_features: None,
            min_leaf_size: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<RegressionTree>,
}

impl RandomForest {
    /// Trees are grown in parallel; each gets its own generator forked from
    /// `rng` in tree order, so the result does not depend on scheduling.
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &ForestConfig, rng: &mut Rng) -> Result<Self> {
        let p = check_table(x, y)?;
        if cfg.n_trees == 0 {
            return Err(Error::InvalidArgument("n_trees must be >= 1".into()));
        }
        let m = cfg
            .max_features
            .unwrap_or_else(|| ((p as f64).sqrt().floor() as usize).max(1))
            .clamp(1, p.max(1));
        let seeds: Vec<Rng> = (0..cfg.n_trees).map(|_| rng.fork()).collect();
        let trees = seeds
            .into_par_iter()
            .map(|mut r| {
                let rows: Vec<usize> = if cfg.bootstrap {
                    (0..x.len()).map(|_| r.below(x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                let sampling = if m >= p {
                    FeatureSampling::All
                } else {
                    FeatureSampling::Subset(m, &mut r)
                };
                RegressionTree::grow(x, y, cfg.min_leaf_size.max(1), rows, sampling)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RandomForest { trees })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}
