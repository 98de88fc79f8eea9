//! Per-model error reports and pairwise comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{absolute_errors, mre_pred, sa};
use super::stats::{a12, rank_sum_better_high, wilcoxon_signed_rank, Alternative, Better};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub issue_keys: Vec<String>,
    pub actual: Vec<f64>,
    pub estimated: Vec<f64>,
    pub absolute_errors: Vec<f64>,
    pub mae: f64,
    /// Present when a random-guess MAE was supplied.
    pub sa: Option<f64>,
    /// Present when every actual value is positive.
    pub mre: Option<f64>,
    pub pred25: Option<f64>,
    pub n: usize,
}

impl EvalReport {
    pub fn new(
        model: &str,
        issue_keys: Vec<String>,
        actual: Vec<f64>,
        estimated: Vec<f64>,
        mae_rguess: Option<f64>,
    ) -> Result<Self> {
        let ae = absolute_errors(&actual, &estimated)?;
        if issue_keys.len() != ae.len() {
            return Err(Error::LengthMismatch {
                left: issue_keys.len(),
                right: ae.len(),
            });
        }
        let mae = ae.iter().sum::<f64>() / ae.len() as f64;
        let sa = mae_rguess.map(|g| sa(mae, g)).transpose()?;
        let (mre, pred25) = match mre_pred(&actual, &estimated, 25.0) {
            Ok((m, p)) => (Some(m), Some(p)),
            Err(_) => (None, None),
        };
        Ok(EvalReport {
            model: model.into(),
            n: ae.len(),
            issue_keys,
            actual,
            estimated,
            absolute_errors: ae,
            mae,
            sa,
            mre,
            pred25,
        })
    }

    /// `issue_key, actual, estimate, absolute_error` per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("issue_key\tactual\testimate\tabsolute_error\n");
        for i in 0..self.n {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                self.issue_keys[i], self.actual[i], self.estimated[i], self.absolute_errors[i]
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub model_a: String,
    pub model_b: String,
    pub p_value: f64,
    /// Probability that model A's absolute error is smaller than model B's.
    pub a12: f64,
    pub m: usize,
    pub n: usize,
    /// Rank sum of model A's errors, ranked from worst to best.
    pub rank_sum: f64,
    pub alternative: Alternative,
}

pub fn compare_pair(a: &EvalReport, b: &EvalReport, alternative: Alternative) -> Result<PairwiseComparison> {
    let w = wilcoxon_signed_rank(&a.absolute_errors, &b.absolute_errors, alternative)?;
    Ok(PairwiseComparison {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        p_value: w.p_value,
        a12: a12(&a.absolute_errors, &b.absolute_errors, Better::Smaller)?,
        m: a.n,
        n: b.n,
        rank_sum: rank_sum_better_high(&a.absolute_errors, &b.absolute_errors, Better::Smaller),
        alternative,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub models: Vec<String>,
    pub mae: Vec<f64>,
    pub sa: Vec<Option<f64>>,
    /// Index of the row with the smallest MAE (first on ties).
    pub best: usize,
    pub pairs: Vec<PairwiseComparison>,
}

/// Builds the comparison table; `pairs` index into `reports`.
pub fn compare_report(
    reports: &[EvalReport],
    pairs: &[(usize, usize)],
    alternative: Alternative,
) -> Result<ComparisonTable> {
    let first = reports.first().ok_or(Error::EmptyInput("reports"))?;
    for r in reports {
        if r.issue_keys != first.issue_keys {
            return Err(Error::InvalidArgument(format!(
                "reports {} and {} cover different test sets",
                first.model, r.model
            )));
        }
    }
    let mut best = 0;
    for (i, r) in reports.iter().enumerate() {
        if r.mae < reports[best].mae {
            best = i;
        }
    }
    let pairs = pairs
        .iter()
        .map(|&(i, j)| {
            let (a, b) = (reports.get(i), reports.get(j));
            match (a, b) {
                (Some(a), Some(b)) => compare_pair(a, b, alternative),
                _ => Err(Error::InvalidArgument(format!("pair ({i}, {j}) out of range"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable {
        models: reports.iter().map(|r| r.model.clone()).collect(),
        mae: reports.iter().map(|r| r.mae).collect(),
        sa: reports.iter().map(|r| r.sa).collect(),
        best,
        pairs,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ComparisonTable {
    /// Two tab-separated blocks separated by a blank line: per-model
    /// accuracy, then pairwise tests.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("model\tmae\tsa\tbest\n");
        for i in 0..self.models.len() {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", self.models[i], self.mae[i], opt(self.sa[i]), i == self.best);
        }
        if !self.pairs.is_empty() {
            s.push_str("\nmodel_a\tmodel_b\tp_value\ta12\tm\tn\trank_sum\n");
            for p in &self.pairs {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    p.model_a, p.model_b, p.p_value, p.a12, p.m, p.n, p.rank_sum
                );
            }
        }
        s
    }

    /// Aligned table; the smallest MAE is wrapped in `**…**`.
    pub fn to_text(&self) -> String {
        let width = self.models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:>10}  {:>8}\n", "model", "MAE", "SA");
        for i in 0..self.models.len() {
            let mae = if i == self.best {
                format!("**{:.2}**", self.mae[i])
            } else {
                format!("{:.2}", self.mae[i])
            };
            let sa = self.sa[i].map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:<width$}  {:>10}  {:>8}", self.models[i], mae, sa);
        }
        if !self.pairs.is_empty() {
            let pw = self
                .pairs
                .iter()
                .map(|p| p.model_a.len() + p.model_b.len() + 4)
                .max()
                .unwrap_or(0);
            s.push('\n');
            for p in &self.pairs {
                let name = format!("{} vs {}", p.model_a, p.model_b);
                let _ = writeln!(s, "{name:<pw$}  {:.4} [{:.2}]", p.p_value, p.a12);
            }
        }
        s
    }
}
