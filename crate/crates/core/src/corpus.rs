//! Issue records, the line-oriented corpus format, filtering, tokenization,
//! vocabularies and chronological splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";
pub const MAX_STORY_POINTS: f64 = 100.0;
pub const DEFAULT_MIN_PROJECT_SIZE: usize = 300;

/// One issue report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IssueRecord {
    pub project: String,
    pub issue_key: String,
    #[serde(with = "utc_seconds")]
    pub created_at: DateTime<Utc>,
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub story_points: Option<f64>,
}

impl IssueRecord {
    pub fn is_labeled(&self) -> bool {
        self.story_points.is_some()
    }

    fn has_valid_points(&self) -> bool {
        matches!(self.story_points, Some(sp) if sp > 0.0 && sp <= MAX_STORY_POINTS)
    }

    /// Story points of a labeled record. Panics on unlabeled records.
    pub fn points(&self) -> f64 {
        self.story_points
            .unwrap_or_else(|| panic!("issue {} has no story points", self.issue_key))
    }
}

mod utc_seconds {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        parse_timestamp(&s).map_err(serde::de::Error::custom)
    }
}

/// Parses ISO-8601 timestamps, including the `+0000` offset style JIRA
/// emits. Sub-second precision is truncated.
pub fn parse_timestamp(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    let parsed = DateTime::parse_from_rfc3339(s)
        .or_else(|_| DateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f%z"))
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))?;
    let utc = parsed.with_timezone(&Utc);
    DateTime::from_timestamp(utc.timestamp(), 0).ok_or_else(|| format!("timestamp out of range: {s}"))
}

/// Counts reported by [`filter_issues`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub unlabeled: usize,
    pub invalid_points: usize,
    pub small_projects: usize,
    pub removed: usize,
    pub removed_fraction: f64,
    pub kept: usize,
}

/// Drops unlabeled records, story points outside `(0, 100]`, and every
/// project with at most `min_project_size` surviving issues. Input order is
/// preserved.
pub fn filter_issues(raw: &[IssueRecord], min_project_size: usize) -> (Vec<IssueRecord>, FilterReport) {
    let mut report = FilterReport {
        input: raw.len(),
        ..Default::default()
    };
    let mut surviving: Vec<&IssueRecord> = Vec::with_capacity(raw.len());
    for r in raw {
        if !r.is_labeled() {
            report.unlabeled += 1;
        } else if !r.has_valid_points() {
            report.invalid_points += 1;
        } else {
            surviving.push(r);
        }
    }
    let mut per_project: HashMap<&str, usize> = HashMap::new();
    for r in &surviving {
        *per_project.entry(r.project.as_str()).or_default() += 1;
    }
    let kept: Vec<IssueRecord> = surviving
        .into_iter()
        .filter(|r| {
            let keep = per_project[r.project.as_str()] > min_project_size;
            if !keep {
                report.small_projects += 1;
            }
            keep
        })
        .cloned()
        .collect();
    report.kept = kept.len();
    report.removed = report.input - report.kept;
    report.removed_fraction = if report.input == 0 {
        0.0
    } else {
        report.removed as f64 / report.input as f64
    };
    (kept, report)
}

/// Title, one space, then description. An empty description yields the title.
pub fn compose_document(issue: &IssueRecord) -> String {
    if issue.description.is_empty() {
        issue.title.clone()
    } else {
        format!("{} {}", issue.title, issue.description)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    #[default]
    Word,
    Character,
}

impl std::str::FromStr for TokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TokenMode::Word),
            "character" | "char" => Ok(TokenMode::Character),
            other => Err(Error::InvalidArgument(format!("unknown tokenizer mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for TokenMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TokenMode::Word => "word",
            TokenMode::Character => "character",
        })
    }
}

fn is_edge_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{00AB}' | '\u{00BB}'
                | '\u{2026}' | '\u{2013}' | '\u{2014}' | '\u{00BF}' | '\u{00A1}'
        )
}

/// Splits text into tokens and appends [`EOS_TOKEN`].
///
/// Word mode lowercases, splits on Unicode whitespace and trims punctuation
/// from both ends of each token. Character mode emits every scalar value,
/// whitespace included.
pub fn tokenize(text: &str, mode: TokenMode) -> Vec<String> {
    let mut out: Vec<String> = match mode {
        TokenMode::Word => text
            .split_whitespace()
            .map(|w| w.trim_matches(is_edge_punctuation).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect(),
        TokenMode::Character => text.chars().map(String::from).collect(),
    };
    out.push(EOS_TOKEN.to_string());
    out
}

/// Token ↔ index bijection. Index 0 is [`UNK_TOKEN`], index 1 is [`EOS_TOKEN`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    mode: TokenMode,
}

impl Vocabulary {
    pub const UNK_ID: usize = 0;
    pub const EOS_ID: usize = 1;

    /// Builds a vocabulary from an explicit token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<String>, mode: TokenMode) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != EOS_TOKEN {
            return Err(Error::InvalidArgument(
                "vocabulary must start with the reserved <unk> and <eos> entries".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index, mode })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn unk_id(&self) -> usize {
        Self::UNK_ID
    }

    pub fn eos_id(&self) -> usize {
        Self::EOS_ID
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Maps tokens to ids, sending unknown tokens to [`Self::UNK_ID`].
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(Self::UNK_ID))
            .collect()
    }

    /// Tokenizes the composed document of `issue` and encodes it.
    pub fn encode_issue(&self, issue: &IssueRecord) -> Vec<usize> {
        self.encode(&tokenize(&compose_document(issue), self.mode))
    }

    /// SHA-256 over the mode and the ordered token list, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.mode.to_string().as_bytes());
        h.update([0u8]);
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// One token per line, index order. Newlines, tabs, carriage returns and
    /// backslashes are backslash-escaped.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(&escape_token(t));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path, mode: TokenMode) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text
            .split_terminator('\n')
            .map(unescape_token)
            .collect::<Result<Vec<_>>>()?;
        Self::from_tokens(tokens, mode)
    }
}

fn escape_token(t: &str) -> String {
    let mut s = String::with_capacity(t.len());
    for c in t.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            '\t' => s.push_str("\\t"),
            c => s.push(c),
        }
    }
    s
}

fn unescape_token(line: &str) -> Result<String> {
    let mut s = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            s.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => s.push('\\'),
            Some('n') => s.push('\n'),
            Some('r') => s.push('\r'),
            Some('t') => s.push('\t'),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "bad escape in vocabulary line {line:?}: {other:?}"
                )))
            }
        }
    }
    Ok(s)
}

/// Frequency-ranked vocabulary: tokens seen at least `min_count` times,
/// most frequent first with lexicographic tie-break, truncated so the total
/// size including the two reserved entries is at most `max_size`.
pub fn build_vocabulary<S: AsRef<str>>(
    docs: &[Vec<S>],
    min_count: usize,
    max_size: usize,
    mode: TokenMode,
) -> Result<Vocabulary> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if min_count < 1 || max_size < 2 {
        return Err(Error::InvalidArgument(
            "min_count must be >= 1 and max_size >= 2".into(),
        ));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        for t in doc {
            let t = t.as_ref();
            if t != UNK_TOKEN && t != EOS_TOKEN {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    // BTreeMap iteration is already lexicographic; a stable sort keeps it for ties.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(max_size - 2);
    let mut tokens = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens, mode)
}

/// Held-out partition. Every content read goes through [`HeldOut::reveal`],
/// which is counted so tests can audit that training never looks at it.
#[derive(Debug, Default)]
pub struct HeldOut {
    records: Vec<IssueRecord>,
    reads: AtomicUsize,
}

impl HeldOut {
    pub fn new(records: Vec<IssueRecord>) -> Self {
        HeldOut {
            records,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn reveal(&self) -> &[IssueRecord] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.records
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Clone for HeldOut {
    fn clone(&self) -> Self {
        HeldOut::new(self.records.clone())
    }
}

/// Chronological train / validation / test partition.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Vec<IssueRecord>,
    pub valid: Vec<IssueRecord>,
    pub test: HeldOut,
}

impl SplitDataset {
    /// Train and validation records, in that order.
    pub fn train_and_valid(&self) -> impl Iterator<Item = &IssueRecord> {
        self.train.iter().chain(self.valid.iter())
    }
}

/// Partition sizes for `n` issues: 60% and 20% rounded half-up, remainder to test.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (6 * n + 5) / 10;
    let valid = (2 * n + 5) / 10;
    (train, valid, n - train - valid)
}

/// Sorts by `(created_at, issue_key)` and cuts at the 60% / 80% points.
pub fn split_chronological(issues: &[IssueRecord]) -> Result<SplitDataset> {
    if issues.len() < 5 {
        return Err(Error::TooFewIssues(issues.len()));
    }
    if let Some(r) = issues.iter().find(|r| !r.is_labeled()) {
        return Err(Error::InvalidArgument(format!(
            "issue {} has no story points",
            r.issue_key
        )));
    }
    let mut sorted = issues.to_vec();
    sorted.sort_by(|a, b| {
        a.created_at
            .cmp(&b.created_at)
            .then_with(|| a.issue_key.cmp(&b.issue_key))
    });
    let (n_train, n_valid, _) = split_sizes(sorted.len());
    let test = sorted.split_off(n_train + n_valid);
    let valid = sorted.split_off(n_train);
    Ok(SplitDataset {
        train: sorted,
        valid,
        test: HeldOut::new(test),
    })
}

/// Story-point summary of a labeled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub mode: f64,
    pub variance: f64,
    pub std_dev: f64,
    pub mean_text_length: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn dataset_stats(issues: &[IssueRecord]) -> Result<DatasetStats> {
    if issues.is_empty() {
        return Err(Error::EmptyInput("dataset_stats"));
    }
    let sps: Vec<f64> = issues
        .iter()
        .map(|r| {
            r.story_points.ok_or_else(|| {
                Error::InvalidArgument(format!("issue {} has no story points", r.issue_key))
            })
        })
        .collect::<Result<_>>()?;
    let n = sps.len() as f64;
    let mean = sps.iter().sum::<f64>() / n;
    let variance = sps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;

    let mut sorted = sps.clone();
    sorted.sort_by(f64::total_cmp);
    // longest run in sorted order; strict '>' keeps the smallest value on ties
    let (mut mode, mut best_run) = (sorted[0], 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&x| x == sorted[i]).count();
        if j > best_run {
            best_run = j;
            mode = sorted[i];
        }
        i += j;
    }

    let total_tokens: usize = issues
        .iter()
        .map(|r| tokenize(&compose_document(r), TokenMode::Word).len() - 1)
        .sum();

    Ok(DatasetStats {
        count: sps.len(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        mean,
        median: median(&sps).expect("non-empty"),
        mode,
        variance,
        std_dev: variance.sqrt(),
        mean_text_length: total_tokens as f64 / n,
    })
}

/// Reads a corpus file: one JSON object per line. Blank lines are skipped.
/// Duplicate issue keys, blank titles and non-finite story points are rejected.
pub fn read_corpus(path: &Path) -> Result<Vec<IssueRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<IssueRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IssueRecord = serde_json::from_str(&line).map_err(|e| Error::InvalidRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let bad = |reason: String| Error::InvalidRecord { line: i + 1, reason };
        if rec.title.trim().is_empty() {
            return Err(bad(format!("issue {} has an empty title", rec.issue_key)));
        }
        if matches!(rec.story_points, Some(sp) if !sp.is_finite()) {
            return Err(bad(format!("issue {} has non-finite story points", rec.issue_key)));
        }
        if !seen.insert(rec.issue_key.clone()) {
            return Err(bad(format!("duplicate issue key {}", rec.issue_key)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Serializes records in the corpus format. Output is byte-deterministic.
pub fn corpus_to_string(records: &[IssueRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

/// Writes records; returns the number written.
pub fn write_corpus(records: &[IssueRecord], path: &Path) -> Result<usize> {
    let body = corpus_to_string(records)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}
