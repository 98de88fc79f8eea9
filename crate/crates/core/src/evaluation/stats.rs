//! Paired significance test and effect size for absolute-error samples.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Effective sample sizes up to this use the exact null distribution.
pub const EXACT_MAX_N: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// The first sample's values tend to be smaller.
    #[default]
    ALess,
    TwoSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of the positive differences `a − b`.
    pub statistic: f64,
    /// Pairs left after dropping zero differences.
    pub n_effective: usize,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped and tied magnitudes get average ranks. For
/// at most [`EXACT_MAX_N`] remaining pairs the null distribution of the
/// statistic is computed exactly (over doubled ranks, which are integers
/// even with ties); above that a normal approximation with continuity
/// correction is used.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    signed_rank_test(a, b, alternative, EXACT_MAX_N)
}

fn signed_rank_test(a: &[f64], b: &[f64], alternative: Alternative, exact_max: usize) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("paired samples"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            p_value: 1.0,
            statistic: 0.0,
            n_effective: 0,
            exact: true,
            degenerate: true,
        });
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();

    let (p, exact) = if n <= exact_max {
        let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
        let total: usize = doubled.iter().sum();
        // counts[s] = number of sign assignments whose positive doubled-rank sum is s
        let mut counts = vec![0.0f64; total + 1];
        counts[0] = 1.0;
        for &r in &doubled {
            for s in (r..=total).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let w = (2.0 * w_plus).round() as usize;
        let lower = counts[..=w].iter().sum::<f64>() / all;
        let upper = counts[w..].iter().sum::<f64>() / all;
        let p = match alternative {
            Alternative::ALess => lower,
            Alternative::TwoSided => (2.0 * lower.min(upper)).min(1.0),
        };
        (p, true)
    } else {
        let mean = ranks.iter().sum::<f64>() / 2.0;
        let sd = (ranks.iter().map(|r| r * r).sum::<f64>() / 4.0).sqrt();
        let p = match alternative {
            Alternative::ALess => normal_cdf((w_plus - mean + 0.5) / sd),
            Alternative::TwoSided => {
                let z = ((w_plus - mean).abs() - 0.5).max(0.0) / sd;
                (2.0 * (1.0 - normal_cdf(z))).min(1.0)
            }
        };
        (p, false)
    };
    Ok(WilcoxonResult {
        p_value: p.clamp(0.0, 1.0),
        statistic: w_plus,
        n_effective: n,
        exact,
        degenerate: false,
    })
}

/// Which direction counts as better when comparing measurements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Better {
    /// Absolute errors: smaller is better.
    #[default]
    Smaller,
    Larger,
}

/// Vargha–Delaney effect size: probability that a draw from `m` beats a draw
/// from `n`, ties counting half.
pub fn a12(m: &[f64], n: &[f64], better: Better) -> Result<f64> {
    if m.is_empty() || n.is_empty() {
        return Err(Error::EmptyInput("effect-size sample"));
    }
    let mut score = 0.0;
    for &x in m {
        for &y in n {
            let wins = match better {
                Better::Smaller => x < y,
                Better::Larger => x > y,
            };
            if wins {
                score += 1.0;
            } else if x == y {
                score += 0.5;
            }
        }
    }
    Ok(score / (m.len() * n.len()) as f64)
}

/// Rank sum of `m` in the pooled sample with ranks assigned from worst to
/// best, so that better values get higher ranks.
pub fn rank_sum_better_high(m: &[f64], n: &[f64], better: Better) -> f64 {
    let pooled: Vec<f64> = m
        .iter()
        .chain(n)
        .map(|&v| match better {
            Better::Smaller => -v,
            Better::Larger => v,
        })
        .collect();
    average_ranks(&pooled)[..m.len()].iter().sum()
}
