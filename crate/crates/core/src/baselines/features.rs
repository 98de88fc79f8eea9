//! Hand-crafted issue and participant features.
//!
//! Raw counts are inputs (mining them from a tracker changelog is out of
//! scope); this module encodes them in a fixed column order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ISSUE_TYPES: [&str; 8] = ["bug", "improvement", "new feature", "story", "task", "sub-task", "epic", "other"];
pub const PRIORITIES: [&str; 6] = ["blocker", "critical", "major", "minor", "trivial", "other"];

/// Raw per-issue inputs, one row of a feature CSV. Empty assignee fields
/// mean the issue had no assignee when it was estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub issue_key: String,
    pub issue_type: String,
    pub priority: String,
    pub subtasks: u32,
    pub issue_links: u32,
    pub blocking: u32,
    pub blocked_by: u32,
    pub affect_versions: u32,
    pub fix_versions: u32,
    pub components: u32,
    pub description_changes: u32,
    pub priority_changes: u32,
    pub reporter_tested: u32,
    pub reporter_reviewed: u32,
    pub reporter_resolved: u32,
    pub reporter_opened: u32,
    pub reporter_opened_and_fixed: u32,
    pub assignee_tested: Option<u32>,
    pub assignee_reviewed: Option<u32>,
    pub assignee_resolved: Option<u32>,
    pub estimator_tested: u32,
    pub estimator_reviewed: u32,
    pub estimator_resolved: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub names: Vec<String>,
    /// Missing entries hold 0.0 and are flagged in `missing`.
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

/// `|opened ∩ fixed| / (|opened| + 1)`.
pub fn reporter_reputation(opened: u32, opened_and_fixed: u32) -> Result<f64> {
    if opened_and_fixed > opened {
        return Err(Error::InvalidArgument(format!(
            "{opened_and_fixed} fixed issues out of {opened} opened"
        )));
    }
    Ok(opened_and_fixed as f64 / (opened as f64 + 1.0))
}

fn one_hot(value: &str, categories: &[&str]) -> Vec<f64> {
    let v = value.trim().to_lowercase();
    let hit = categories.iter().position(|&c| c == v).unwrap_or(categories.len() - 1);
    (0..categories.len()).map(|i| if i == hit { 1.0 } else { 0.0 }).collect()
}

pub fn feature_names() -> Vec<String> {
    let mut names: Vec<String> = ISSUE_TYPES.iter().map(|t| format!("type={t}")).collect();
    names.extend(PRIORITIES.iter().map(|p| format!("priority={p}")));
    for n in [
        "subtasks",
        "issue_links",
        "blocking",
        "blocked_by",
        "affect_versions",
        "fix_versions",
        "components",
        "description_changes",
        "priority_changes",
        "reporter_tested",
        "reporter_reviewed",
        "reporter_resolved",
        "reporter_reputation",
        "assignee_tested",
        "assignee_reviewed",
        "assignee_resolved",
        "estimator_tested",
        "estimator_reviewed",
        "estimator_resolved",
    ] {
        names.push(n.to_string());
    }
    names
}

/// Unknown types and priorities fall into the `other` bucket.
pub fn assemble_features(r: &FeatureRecord) -> Result<FeatureVector> {
    let mut values = one_hot(&r.issue_type, &ISSUE_TYPES);
    values.extend(one_hot(&r.priority, &PRIORITIES));
    let mut missing = vec![false; values.len()];
    let c = |v: u32| Some(v as f64);
    let numeric = [
        c(r.subtasks),
        c(r.issue_links),
        c(r.blocking),
        c(r.blocked_by),
        c(r.affect_versions),
        c(r.fix_versions),
        c(r.components),
        c(r.description_changes),
        c(r.priority_changes),
        c(r.reporter_tested),
        c(r.reporter_reviewed),
        c(r.reporter_resolved),
        Some(reporter_reputation(r.reporter_opened, r.reporter_opened_and_fixed)?),
        r.assignee_tested.map(f64::from),
        r.assignee_reviewed.map(f64::from),
        r.assignee_resolved.map(f64::from),
        c(r.estimator_tested),
        c(r.estimator_reviewed),
        c(r.estimator_resolved),
    ];
    for v in numeric {
        values.push(v.unwrap_or(0.0));
        missing.push(v.is_none());
    }
    Ok(FeatureVector {
        names: feature_names(),
        values,
        missing,
    })
}

/// Missing-value handling fitted on training rows: each missing entry is
/// replaced by the training mean of its column, and every column that is
/// missing somewhere in training gets an extra 0/1 indicator column (used
/// by trees, which can branch on it).
#[derive(Clone, Debug, PartialEq)]
pub struct Imputer {
    pub means: Vec<f64>,
    pub indicator_columns: Vec<usize>,
}

impl Imputer {
    pub fn fit(train: &[FeatureVector]) -> Result<Self> {
        let p = train.first().ok_or(Error::EmptyInput("feature rows"))?.values.len();
        let mut means = vec![0.0; p];
        let mut indicator_columns = Vec::new();
        for j in 0..p {
            let present: Vec<f64> = train.iter().filter(|r| !r.missing[j]).map(|r| r.values[j]).collect();
            if present.len() < train.len() {
                indicator_columns.push(j);
            }
            if !present.is_empty() {
                means[j] = present.iter().sum::<f64>() / present.len() as f64;
            }
        }
        Ok(Imputer {
            means,
            indicator_columns,
        })
    }

    pub fn transform(&self, row: &FeatureVector, indicators: bool) -> Vec<f64> {
        let mut out: Vec<f64> = row
            .values
            .iter()
            .zip(&row.missing)
            .zip(&self.means)
            .map(|((&v, &m), &mean)| if m { mean } else { v })
            .collect();
        if indicators {
            out.extend(self.indicator_columns.iter().map(|&j| if row.missing[j] { 1.0 } else { 0.0 }));
        }
        out
    }
}

pub fn read_feature_records(path: &Path) -> Result<Vec<FeatureRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::InvalidRecord {
                line: i + 2,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_feature_records(records: &[FeatureRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Encoded table with a header row; missing values are empty fields.
pub fn feature_table_to_csv(keys: &[String], rows: &[FeatureVector]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["issue_key".to_string()];
    header.extend(feature_names());
    w.write_record(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for (k, r) in keys.iter().zip(rows) {
        let mut fields = vec![k.clone()];
        fields.extend(
            r.values
                .iter()
                .zip(&r.missing)
                .map(|(v, &m)| if m { String::new() } else { v.to_string() }),
        );
        w.write_record(&fields).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
    }
}
