//! On-disk layout of a prepared directory and the estimate file format.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use ldrnn_core::corpus::{read_corpus, HeldOut, IssueRecord, SplitDataset, TokenMode, Vocabulary};

use crate::UsageError;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALID_FILE: &str = "valid.jsonl";
/// Labeled test partition; only `evaluate` and `cross-project` open it.
pub const TEST_FILE: &str = "test.jsonl";
/// Test issues with labels stripped, for estimators.
pub const TEST_INPUTS_FILE: &str = "test_inputs.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STATS_FILE: &str = "stats.json";

pub fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(UsageError(format!("{} does not exist", path.display())).into());
    }
    Ok(())
}

pub fn read_records(path: &Path) -> anyhow::Result<Vec<IssueRecord>> {
    require_file(path)?;
    Ok(read_corpus(path)?)
}

/// Train and validation partitions; the test slot stays empty.
pub fn load_training(dir: &Path) -> anyhow::Result<SplitDataset> {
    Ok(SplitDataset {
        train: read_records(&dir.join(TRAIN_FILE))?,
        valid: read_records(&dir.join(VALID_FILE))?,
        test: HeldOut::new(Vec::new()),
    })
}

pub fn load_test(dir: &Path) -> anyhow::Result<Vec<IssueRecord>> {
    let test = read_records(&dir.join(TEST_FILE))?;
    if let Some(r) = test.iter().find(|r| !r.is_labeled()) {
        bail!("test issue {} has no story points", r.issue_key);
    }
    Ok(test)
}

pub fn load_vocab(path: &Path, mode: TokenMode) -> anyhow::Result<Vocabulary> {
    require_file(path)?;
    Ok(Vocabulary::read_file(path, mode)?)
}

pub fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn write_estimates(path: &Path, estimates: &[(String, f64)]) -> anyhow::Result<()> {
    let mut s = String::from("issue_key\testimate\n");
    for (k, v) in estimates {
        let _ = writeln!(s, "{k}\t{v}");
    }
    write_text(path, &s)
}

pub fn read_estimates(path: &Path) -> anyhow::Result<Vec<(String, f64)>> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some("issue_key\testimate") {
        bail!("{}: missing issue_key<TAB>estimate header", path.display());
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('\t')
            .with_context(|| format!("{}:{}: expected two columns", path.display(), i + 2))?;
        let value: f64 = value
            .trim()
            .parse()
            .with_context(|| format!("{}:{}: bad estimate {value:?}", path.display(), i + 2))?;
        if !seen.insert(key.to_string()) {
            bail!("{}: duplicate issue key {key}", path.display());
        }
        out.push((key.to_string(), value));
    }
    Ok(out)
}

/// `NAME=PATH`; a bare path is named after its file stem.
pub fn parse_named_path(arg: &str) -> anyhow::Result<(String, PathBuf)> {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), path.into())),
        Some(_) => Err(UsageError(format!("bad estimate argument {arg:?}, expected NAME=PATH")).into()),
        None => {
            let path = PathBuf::from(arg);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| UsageError(format!("bad estimate argument {arg:?}")))?;
            Ok((name, path))
        }
    }
}
