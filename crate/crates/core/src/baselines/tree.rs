//! CART regression tree: greedy variance-reduction splits, minimum leaf
//! size, and level pruning.

use serde::{Deserialize, Serialize};

use super::check_table;
use crate::error::Result;
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub min_leaf_size: usize,
    /// Number of deepest levels collapsed after growing.
    pub prune_level: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            min_leaf_size: 5,
            prune_level: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    /// Rows with `x[feature] <= threshold` go left.
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    /// Mean training target of the rows reaching this node.
    pub mean: f64,
    pub count: usize,
    pub depth: usize,
    pub split: Option<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Arena; the root is node 0.
    pub nodes: Vec<Node>,
    pub config: TreeConfig,
}

/// Per-node choice of candidate features: all of them, or a fresh random
/// subset of the given size.
pub(crate) enum FeatureSampling<'a> {
    All,
    Subset(usize, &'a mut Rng),
}

fn sse(sum: f64, sum_sq: f64, n: f64) -> f64 {
    (sum_sq - sum * sum / n).max(0.0)
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn best_split(&self, rows: &[usize], features: &[usize]) -> Option<(usize, f64)> {
        let n = rows.len();
        if n < 2 * self.min_leaf {
            return None;
        }
        let (sum, sum_sq) = rows.iter().fold((0.0, 0.0), |(s, q), &i| (s + self.y[i], q + self.y[i] * self.y[i]));
        let parent = sse(sum, sum_sq, n as f64);
        if parent <= 1e-12 {
            return None;
        }
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted = rows.to_vec();
        for &f in features {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut ls, mut lq) = (0.0, 0.0);
            for k in 0..n - 1 {
                let i = sorted[k];
                ls += self.y[i];
                lq += self.y[i] * self.y[i];
                let left_n = k + 1;
                if left_n < self.min_leaf || n - left_n < self.min_leaf {
                    continue;
                }
                let (a, b) = (self.x[i][f], self.x[sorted[k + 1]][f]);
                if a >= b {
                    continue;
                }
                let gain =
                    parent - sse(ls, lq, left_n as f64) - sse(sum - ls, sum_sq - lq, (n - left_n) as f64);
                if gain > 1e-12 * parent && best.is_none_or(|(_, _, g)| gain > g) {
                    let mid = 0.5 * (a + b);
                    let threshold = if mid < b { mid } else { a };
                    best = Some((f, threshold, gain));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize, sampling: &mut FeatureSampling) -> usize {
        let mean = rows.iter().map(|&i| self.y[i]).sum::<f64>() / rows.len() as f64;
        let id = self.nodes.len();
        self.nodes.push(Node {
            mean,
            count: rows.len(),
            depth,
            split: None,
        });
        let p = self.x[0].len();
        let features: Vec<usize> = match sampling {
            FeatureSampling::All => (0..p).collect(),
            FeatureSampling::Subset(m, rng) => {
                let mut all: Vec<usize> = (0..p).collect();
                rng.shuffle(&mut all);
                let mut chosen = all[..(*m).min(p)].to_vec();
                chosen.sort_unstable();
                chosen
            }
        };
        if let Some((feature, threshold)) = self.best_split(&rows, &features) {
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
            let left = self.grow(l, depth + 1, sampling);
            let right = self.grow(r, depth + 1, sampling);
            self.nodes[id].split = Some(Split {
                feature,
                threshold,
                left,
                right,
            });
        }
        id
    }
}

impl RegressionTree {
    pub fn fit(x: &[Vec<f64>], y: &[f64], config: &TreeConfig) -> Result<Self> {
        let tree = Self::grow(x, y, config.min_leaf_size.max(1), (0..x.len()).collect(), FeatureSampling::All)?;
        Ok(tree.pruned(config.prune_level).with_config(config.clone()))
    }

    /// Unpruned tree over the given (possibly repeated) row indices.
    pub(crate) fn grow(
        x: &[Vec<f64>],
        y: &[f64],
        min_leaf: usize,
        rows: Vec<usize>,
        mut sampling: FeatureSampling,
    ) -> Result<Self> {
        check_table(x, y)?;
        let mut g = Grower {
            x,
            y,
            min_leaf,
            nodes: Vec::new(),
        };
        g.grow(rows, 0, &mut sampling);
        Ok(RegressionTree {
            nodes: g.nodes,
            config: TreeConfig {
                min_leaf_size: min_leaf,
                prune_level: 0,
            },
        })
    }

    fn with_config(mut self, config: TreeConfig) -> Self {
        self.config = config;
        self
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).count()
    }

    /// Collapses the `levels` deepest levels into leaves.
    pub fn pruned(&self, levels: usize) -> RegressionTree {
        let cutoff = self.depth().saturating_sub(levels);
        let mut nodes = Vec::new();
        self.copy_into(0, cutoff, &mut nodes);
        RegressionTree {
            nodes,
            config: self.config.clone(),
        }
    }

    fn copy_into(&self, id: usize, cutoff: usize, out: &mut Vec<Node>) -> usize {
        let src = &self.nodes[id];
        let new_id = out.len();
        out.push(Node {
            split: None,
            ..src.clone()
        });
        if let Some(s) = src.split.as_ref().filter(|_| src.depth < cutoff) {
            let left = self.copy_into(s.left, cutoff, out);
            let right = self.copy_into(s.right, cutoff, out);
            out[new_id].split = Some(Split {
                left,
                right,
                ..s.clone()
            });
        }
        new_id
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = &self.nodes[0];
        while let Some(s) = &node.split {
            node = &self.nodes[if x[s.feature] <= s.threshold { s.left } else { s.right }];
        }
        node.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unpruned(min_leaf_size: usize) -> TreeConfig {
        TreeConfig {
            min_leaf_size,
            prune_level: 0,
        }
    }

    #[test]
    fn constant_targets_give_one_leaf() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, (i * 7 % 5) as f64]).collect();
        let t = RegressionTree::fit(&x, &[2.5; 30], &unpruned(1)).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.predict(&[100.0, -3.0]), 2.5);
    }

    #[test]
    fn leaf_count_bounded_by_min_leaf_size() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let t = RegressionTree::fit(&x, &y, &unpruned(5)).unwrap();
        assert!(t.leaf_count() <= 4 && t.leaf_count() > 1);
        assert!(t.nodes.iter().filter(|n| n.split.is_none()).all(|n| n.count >= 5));
    }

    /// Exhaustive oracle for trees that can split at most once: every
    /// (feature, cut) with both sides ≥ min_leaf, scored by direct variance.
    fn exhaustive_stump(x: &[Vec<f64>], y: &[f64], min_leaf: usize) -> impl Fn(&[f64]) -> f64 {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let cost = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>()
        };
        let mut best: Option<(f64, usize, f64, f64, f64)> = None;
        for f in 0..x[0].len() {
            let mut values: Vec<f64> = x.iter().map(|r| r[f]).collect();
            values.sort_by(f64::total_cmp);
            values.dedup();
            for &cut in &values {
                let (l, r): (Vec<f64>, Vec<f64>) = {
                    let l: Vec<f64> = (0..y.len()).filter(|&i| x[i][f] <= cut).map(|i| y[i]).collect();
                    let r: Vec<f64> = (0..y.len()).filter(|&i| x[i][f] > cut).map(|i| y[i]).collect();
                    (l, r)
                };
                if l.len() < min_leaf || r.len() < min_leaf {
                    continue;
                }
                let c = cost(&l) + cost(&r);
                if best.as_ref().is_none_or(|b| c < b.0) {
                    best = Some((c, f, cut, mean(&l), mean(&r)));
                }
            }
        }
        let all = mean(y);
        move |q: &[f64]| match best {
            Some((_, f, cut, l, r)) => {
                if q[f] <= cut {
                    l
                } else {
                    r
                }
            }
            None => all,
        }
    }

    #[test]
    fn matches_exhaustive_split_oracle() {
        let mut rng = Rng::new(2024);
        for _ in 0..25 {
            let x: Vec<Vec<f64>> = (0..12).map(|_| vec![rng.uniform(), rng.uniform_range(-5.0, 5.0)]).collect();
            let y: Vec<f64> = (0..12).map(|_| rng.uniform_range(0.0, 13.0)).collect();
            let tree = RegressionTree::fit(&x, &y, &unpruned(5)).unwrap();
            let oracle = exhaustive_stump(&x, &y, 5);
            for row in &x {
                assert!((tree.predict(row) - oracle(row)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pruning_collapses_the_deepest_levels() {
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..64).map(|i| ((i * i) % 17) as f64).collect();
        let full = RegressionTree::fit(&x, &y, &unpruned(1)).unwrap();
        let d = full.depth();
        assert!(d >= 3);
        let p1 = full.pruned(1);
        assert_eq!(p1.depth(), d - 1);
        assert_eq!(full.pruned(d + 4).nodes.len(), 1);
        assert!((full.pruned(d).predict(&[3.0]) - y.iter().sum::<f64>() / 64.0).abs() < 1e-12);
        let cfg = TreeConfig {
            min_leaf_size: 1,
            prune_level: 2,
        };
        assert_eq!(RegressionTree::fit(&x, &y, &cfg).unwrap().depth(), d - 2);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(RegressionTree::fit(&[vec![1.0]], &[1.0, 2.0], &unpruned(1)).is_err());
        assert!(RegressionTree::fit(&[], &[], &unpruned(1)).is_err());
    }
}
