//! One function per subcommand. Each returns its one-line summary.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use anyhow::{bail, Context};
use serde_json::json;

use ldrnn_core::baselines::features::{read_feature_records, Imputer};
use ldrnn_core::baselines::{
    assemble_features, bow_vectorize, cbr_estimate, lasso_select, mean_effort, median_effort, ols_fit, random_guess,
    RandomForest, RegressionTree,
};
use ldrnn_core::corpus::{
    build_vocabulary, compose_document, dataset_stats, filter_issues, split_chronological, tokenize, write_corpus,
    IssueRecord, SplitDataset, Vocabulary,
};
use ldrnn_core::evaluation::{compare_report, kmeans_embeddings, random_guess_mae, EvalReport};
use ldrnn_core::ingest::{fetch_issues, IngestConfig};
use ldrnn_core::model::{pooled_features, Checkpoint, LdRnnParams, Stage};
use ldrnn_core::numerics::Rng;
use ldrnn_core::pretrain::{self, lm_sequences, PretrainOutcome};
use ldrnn_core::trainer::{self, cross_project_train, transfer_pretrain_corpus, RepositorySetting};

use crate::config::RunConfig;
use crate::files::*;
use crate::{
    BaselineArgs, BaselineModel, ClusterArgs, CrossProjectArgs, EstimateArgs, EvaluateArgs, IngestArgs, PrepareArgs,
    PretrainArgs, TrainArgs, UsageError,
};

pub const CHECKPOINT_FILE: &str = "model.json";
pub const PRETRAINED_FILE: &str = "pretrained.json";
pub const VOCAB_FILE: &str = "vocab.txt";

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn labels(records: &[IssueRecord]) -> anyhow::Result<Vec<f64>> {
    records
        .iter()
        .map(|r| r.story_points.with_context(|| format!("issue {} has no story points", r.issue_key)))
        .collect()
}

fn vocabulary<'a>(records: impl IntoIterator<Item = &'a IssueRecord>, cfg: &RunConfig) -> anyhow::Result<Vocabulary> {
    let docs: Vec<Vec<String>> = records
        .into_iter()
        .map(|r| tokenize(&compose_document(r), cfg.model.token_mode))
        .collect();
    Ok(build_vocabulary(
        &docs,
        cfg.corpus.vocab_min_count,
        cfg.corpus.vocab_max_size.unwrap_or(usize::MAX),
        cfg.model.token_mode,
    )?)
}

fn strip_labels(records: &[IssueRecord]) -> Vec<IssueRecord> {
    records
        .iter()
        .map(|r| IssueRecord {
            story_points: None,
            ..r.clone()
        })
        .collect()
}

fn write_records(path: &Path, records: &[IssueRecord]) -> anyhow::Result<()> {
    write_text(path, "")?;
    write_corpus(records, path)?;
    Ok(())
}

pub fn ingest(cfg: &RunConfig, a: IngestArgs) -> anyhow::Result<String> {
    let icfg = IngestConfig {
        base_url: a.base_url,
        jql: a.jql,
        story_point_field: a.sp_field.unwrap_or_else(|| cfg.ingest.story_point_field.clone()),
        page_size: a.page_size.unwrap_or(cfg.ingest.page_size),
        max_issues: a.max_issues,
        auth_token: a.token.filter(|t| !t.is_empty()),
        rate_limit: a.rate_limit.unwrap_or(cfg.ingest.rate_limit),
        timeout_secs: cfg.ingest.timeout_secs,
        backoff_base_secs: cfg.ingest.backoff_secs,
    };
    icfg.validate().map_err(usage)?;
    let out = fetch_issues(&icfg)?;
    for key in &out.skipped.non_numeric_points {
        log::warn!("skipped {key}: non-numeric story points");
    }
    for key in &out.skipped.malformed {
        log::warn!("skipped {key}: missing key, title or creation time");
    }
    write_records(&a.out, &out.records)?;
    Ok(format!(
        "ingested {} issues ({} skipped) in {} requests -> {}",
        out.records.len(),
        out.skipped.total(),
        out.requests,
        a.out.display()
    ))
}

pub fn prepare(cfg: &RunConfig, a: PrepareArgs) -> anyhow::Result<String> {
    let mut raw = read_records(&a.input)?;
    let dir = cfg.out_dir(a.out_dir.as_deref())?;
    let project = a.project.or_else(|| cfg.corpus.project.clone());
    if let Some(p) = &project {
        raw.retain(|r| &r.project == p);
        if raw.is_empty() {
            return Err(usage(format!("no issues of project {p} in {}", a.input.display())));
        }
    }
    let min_project_size = a.min_project_size.unwrap_or(cfg.corpus.min_project_size);
    let (kept, report) = filter_issues(&raw, min_project_size);
    if kept.is_empty() {
        bail!(
            "no issues survive filtering ({} of {} removed; min project size {min_project_size})",
            report.removed,
            report.input
        );
    }
    let stats = dataset_stats(&kept)?;
    let split = split_chronological(&kept)?;
    let test = split.test.reveal();

    write_records(&dir.join(TRAIN_FILE), &split.train)?;
    write_records(&dir.join(VALID_FILE), &split.valid)?;
    write_records(&dir.join(TEST_FILE), test)?;
    write_records(&dir.join(TEST_INPUTS_FILE), &strip_labels(test))?;

    let keys = |rs: &[IssueRecord]| rs.iter().map(|r| r.issue_key.clone()).collect::<Vec<_>>();
    write_json(
        &dir.join(MANIFEST_FILE),
        &json!({
            "project": project,
            "min_project_size": min_project_size,
            "counts": {"train": split.train.len(), "valid": split.valid.len(), "test": test.len()},
            "train": keys(&split.train),
            "valid": keys(&split.valid),
            "test": keys(test),
        }),
    )?;
    write_json(
        &dir.join(STATS_FILE),
        &json!({
            "filter": report,
            "all": stats,
            "train": dataset_stats(&split.train)?,
            "valid": dataset_stats(&split.valid)?,
            "test": dataset_stats(test)?,
        }),
    )?;
    Ok(format!(
        "prepared {} issues ({} removed, {:.2}%): train {} / valid {} / test {}; mean {:.2} median {} variance {:.2}",
        kept.len(),
        report.removed,
        100.0 * report.removed_fraction,
        split.train.len(),
        split.valid.len(),
        test.len(),
        stats.mean,
        stats.median,
        stats.variance
    ))
}

/// Language-model pre-training over unlabeled text; the vocabulary covers
/// exactly that text.
fn pretrain_on(text: &[IssueRecord], cfg: &RunConfig) -> anyhow::Result<(Vocabulary, PretrainOutcome)> {
    let vocab = vocabulary(text, cfg)?;
    let sequences = lm_sequences(text, &vocab);
    let mut pcfg = cfg.pretrain.clone();
    if pcfg.nce_samples > vocab.len() {
        log::warn!("nce_samples {} exceeds vocabulary size {}; using {}", pcfg.nce_samples, vocab.len(), vocab.len());
        pcfg.nce_samples = vocab.len();
    }
    let init = LdRnnParams::init(cfg.model.embedding_dim, vocab.len(), &mut Rng::new(cfg.seed()));
    let outcome = pretrain::pretrain(&sequences, init, &pcfg)?;
    Ok((vocab, outcome))
}

pub fn pretrain(mut cfg: RunConfig, a: PretrainArgs) -> anyhow::Result<String> {
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    cfg.validate()?;
    let dir = cfg.out_dir(a.out_dir.as_deref())?;
    let split = load_training(&a.data)?;
    let mut text = strip_labels(&split.train_and_valid().cloned().collect::<Vec<_>>());
    for path in &a.unlabeled {
        text.extend(strip_labels(&read_records(path)?));
    }
    let (vocab, out) = pretrain_on(&text, &cfg)?;
    Checkpoint::new(Stage::Pretrained, &cfg.model, &vocab.content_hash(), &out.params).save(&dir.join(PRETRAINED_FILE))?;
    vocab.write_file(&dir.join(VOCAB_FILE))?;
    write_text(&dir.join("pretrain_curve.csv"), &pretrain::curve_to_csv(&out.curve))?;
    Ok(format!(
        "pretrained on {} issues, {} tokens in vocabulary: perplexity {:.4} -> {:.4} (best epoch {})",
        text.len(),
        vocab.len(),
        out.initial_perplexity,
        out.best_perplexity,
        out.best_epoch
    ))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    require_file(path)?;
    Ok(Checkpoint::load(path)?)
}

/// Checkpoint plus the vocabulary it was trained with.
fn load_model(checkpoint: &Path, vocab: &Path) -> anyhow::Result<(Checkpoint, Vocabulary)> {
    let ck = load_checkpoint(checkpoint)?;
    let vocab = load_vocab(vocab, ck.config.token_mode)?;
    ck.require_vocab(&vocab.content_hash())?;
    Ok((ck, vocab))
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> anyhow::Result<String> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let dir = cfg.out_dir(a.out_dir.as_deref())?;
    let split = load_training(&a.data)?;
    let (vocab, pretrained) = match (&a.pretrained, &a.vocab) {
        (Some(ck), Some(v)) => {
            let (ck, vocab) = load_model(ck, v)?;
            if ck.config.embedding_dim != cfg.model.embedding_dim || ck.config.token_mode != cfg.model.token_mode {
                return Err(usage(format!(
                    "pretrained checkpoint has embedding_dim {} / {} tokens, config asks for {} / {}",
                    ck.config.embedding_dim, ck.config.token_mode, cfg.model.embedding_dim, cfg.model.token_mode
                )));
            }
            (vocab, Some(ck.params()?))
        }
        (None, Some(v)) => (load_vocab(v, cfg.model.token_mode)?, None),
        _ => (vocabulary(split.train_and_valid(), &cfg)?, None),
    };
    let out = trainer::train(&split, &vocab, &cfg.model, &cfg.train, pretrained.as_ref())?;
    if let Some(reason) = &out.aborted {
        log::warn!("training stopped early: {reason}");
    }
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    vocab.write_file(&dir.join(VOCAB_FILE))?;
    write_text(&dir.join("train_curve.csv"), &trainer::curve_to_csv(&out.curve))?;
    Ok(format!(
        "trained on {} issues for {} epochs: validation MAE {:.4} -> {:.4} (best epoch {}){}",
        split.train.len(),
        out.curve.len(),
        out.initial_valid_mae,
        out.best_valid_mae,
        out.best_epoch,
        if out.aborted.is_some() { ", aborted" } else { "" }
    ))
}

pub fn estimate(a: EstimateArgs) -> anyhow::Result<String> {
    let (ck, vocab) = load_model(&a.checkpoint, &a.vocab)?;
    let issues = read_records(&a.input)?;
    let est = trainer::estimate(&ck, &vocab, &issues)?;
    let rows: Vec<(String, f64)> = est.into_iter().map(|e| (e.issue_key, e.story_points)).collect();
    write_estimates(&a.out, &rows)?;
    Ok(format!("estimated {} issues -> {}", rows.len(), a.out.display()))
}

/// Row-major tables for the train, validation and query records.
struct Tables {
    train: Vec<Vec<f64>>,
    valid: Vec<Vec<f64>>,
    query: Vec<Vec<f64>>,
}

fn bow_tables(split: &SplitDataset, query: &[IssueRecord], cfg: &RunConfig) -> anyhow::Result<Tables> {
    let vocab = vocabulary(split.train_and_valid(), cfg)?;
    let vec = |rs: &[IssueRecord]| -> Vec<Vec<f64>> {
        rs.iter()
            .map(|r| bow_vectorize(&tokenize(&compose_document(r), cfg.model.token_mode), &vocab))
            .collect()
    };
    Ok(Tables {
        train: vec(&split.train),
        valid: vec(&split.valid),
        query: vec(query),
    })
}

fn feature_tables(path: &Path, split: &SplitDataset, query: &[IssueRecord], indicators: bool) -> anyhow::Result<Tables> {
    require_file(path)?;
    let mut by_key = HashMap::new();
    for r in read_feature_records(path)? {
        let key = r.issue_key.clone();
        by_key.insert(key, assemble_features(&r)?);
    }
    let rows = |rs: &[IssueRecord]| {
        rs.iter()
            .map(|r| {
                by_key
                    .get(&r.issue_key)
                    .cloned()
                    .with_context(|| format!("{}: no features for {}", path.display(), r.issue_key))
            })
            .collect::<anyhow::Result<Vec<_>>>()
    };
    let (train, valid, query) = (rows(&split.train)?, rows(&split.valid)?, rows(query)?);
    let imputer = Imputer::fit(&train)?;
    let t = |rs: &[_]| rs.iter().map(|r| imputer.transform(r, indicators)).collect();
    Ok(Tables {
        train: t(&train),
        valid: t(&valid),
        query: t(&query),
    })
}

fn lstm_tables(a: &BaselineArgs, split: &SplitDataset, query: &[IssueRecord]) -> anyhow::Result<Tables> {
    let (Some(ck), Some(v)) = (&a.checkpoint, &a.vocab) else {
        return Err(usage("lstm-rf needs --checkpoint and --vocab from `train`"));
    };
    let (ck, vocab) = load_model(ck, v)?;
    let params = ck.params()?;
    let pooled = |rs: &[IssueRecord]| -> anyhow::Result<Vec<Vec<f64>>> {
        rs.iter()
            .map(|r| Ok(pooled_features(&vocab.encode_issue(r), &params)?))
            .collect()
    };
    Ok(Tables {
        train: pooled(&split.train)?,
        valid: pooled(&split.valid)?,
        query: pooled(query)?,
    })
}

pub fn baseline(cfg: &RunConfig, a: BaselineArgs) -> anyhow::Result<String> {
    cfg.validate()?;
    let split = load_training(&a.data)?;
    let input = a.input.clone().unwrap_or_else(|| a.data.join(TEST_INPUTS_FILE));
    let query = read_records(&input)?;
    let train_y = labels(&split.train)?;
    let mut rng = Rng::new(cfg.seed());
    let n = query.len();
    let tables = || match (&a.features, a.model) {
        (_, BaselineModel::LstmRf) => lstm_tables(&a, &split, &query),
        (Some(f), BaselineModel::Cbr | BaselineModel::Cart | BaselineModel::Ols | BaselineModel::Lasso) => {
            feature_tables(f, &split, &query, a.model == BaselineModel::Cart)
        }
        _ => bow_tables(&split, &query, cfg),
    };
    let estimates: Vec<f64> = match a.model {
        BaselineModel::Mean => vec![mean_effort(&train_y)?; n],
        BaselineModel::Median => vec![median_effort(&train_y)?; n],
        BaselineModel::Random => (0..n)
            .map(|_| random_guess(&train_y, &mut rng))
            .collect::<Result<_, _>>()?,
        BaselineModel::BowRf | BaselineModel::LstmRf => {
            let t = tables()?;
            let forest = RandomForest::fit(&t.train, &train_y, &cfg.baseline.forest, &mut rng)?;
            t.query.iter().map(|x| forest.predict(x)).collect()
        }
        BaselineModel::Cbr => {
            let t = tables()?;
            t.query
                .iter()
                .map(|x| cbr_estimate(&t.train, &train_y, x, cfg.baseline.cbr_k))
                .collect::<Result<_, _>>()?
        }
        BaselineModel::Cart => {
            let t = tables()?;
            let tree = RegressionTree::fit(&t.train, &train_y, &cfg.baseline.tree)?;
            t.query.iter().map(|x| tree.predict(x)).collect()
        }
        BaselineModel::Ols => {
            let t = tables()?;
            let m = ols_fit(&t.train, &train_y)?;
            t.query.iter().map(|x| m.predict(x)).collect()
        }
        BaselineModel::Lasso => {
            let t = tables()?;
            let valid_y = labels(&split.valid)?;
            let m = lasso_select(&t.train, &train_y, &t.valid, &valid_y, cfg.baseline.lasso_grid)?;
            log::info!("lasso: lambda {} keeps {} coefficients", m.lambda, m.selected.len());
            t.query.iter().map(|x| m.predict(x)).collect()
        }
    };
    let rows: Vec<(String, f64)> = query.iter().map(|r| r.issue_key.clone()).zip(estimates).collect();
    write_estimates(&a.out, &rows)?;
    let name = format!("{:?}", a.model).to_lowercase();
    Ok(format!("baseline {name}: estimated {n} issues -> {}", a.out.display()))
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

/// Lines up an estimate file with the test issues.
fn aligned(path: &Path, keys: &[String]) -> anyhow::Result<Vec<f64>> {
    let est: HashMap<String, f64> = read_estimates(path)?.into_iter().collect();
    if est.len() != keys.len() {
        log::warn!("{}: {} estimates for {} test issues", path.display(), est.len(), keys.len());
    }
    keys.iter()
        .map(|k| est.get(k).copied().with_context(|| format!("{}: no estimate for {k}", path.display())))
        .collect()
}

pub fn evaluate(cfg: &RunConfig, a: EvaluateArgs) -> anyhow::Result<String> {
    let dir = cfg.out_dir(a.out_dir.as_deref())?;
    let split = load_training(&a.data)?;
    let test = load_test(&a.data)?;
    let keys: Vec<String> = test.iter().map(|r| r.issue_key.clone()).collect();
    let actual = labels(&test)?;
    let rguess = random_guess_mae(
        &labels(&split.train)?,
        &actual,
        cfg.evaluation.rguess_runs,
        &mut Rng::new(cfg.seed()),
    )?;
    let mae_rguess = Some(rguess.mae).filter(|m| *m > 0.0);

    let mut reports = Vec::new();
    let mut index = BTreeMap::new();
    for arg in &a.estimates {
        let (name, path) = parse_named_path(arg)?;
        if index.insert(name.clone(), reports.len()).is_some() {
            return Err(usage(format!("model name {name} given twice")));
        }
        let est = aligned(&path, &keys)?;
        reports.push(EvalReport::new(&name, keys.clone(), actual.clone(), est, mae_rguess)?);
    }
    let pairs: Vec<(usize, usize)> = if a.pairs.is_empty() {
        (1..reports.len()).map(|j| (0, j)).collect()
    } else {
        a.pairs
            .iter()
            .map(|p| {
                let (x, y) = p.split_once(':').ok_or_else(|| usage(format!("bad pair {p:?}, expected A:B")))?;
                let ix = |m: &str| index.get(m).copied().ok_or_else(|| usage(format!("unknown model {m} in pair")));
                Ok((ix(x)?, ix(y)?))
            })
            .collect::<anyhow::Result<_>>()?
    };
    let table = compare_report(&reports, &pairs, cfg.evaluation.alternative)?;

    for r in &reports {
        write_text(&dir.join("reports").join(format!("{}.tsv", file_safe(&r.model))), &r.to_tsv())?;
    }
    write_text(&dir.join("comparison.tsv"), &table.to_tsv())?;
    write_text(&dir.join("comparison.txt"), &table.to_text())?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "random_guess": {"mae": rguess.mae, "standard_error": rguess.standard_error, "runs": rguess.runs},
            "models": reports.iter().map(|r| json!({
                "model": r.model, "n": r.n, "mae": r.mae, "sa": r.sa, "mre": r.mre, "pred25": r.pred25,
            })).collect::<Vec<_>>(),
            "pairs": table.pairs,
        }),
    )?;
    let best = &reports[table.best];
    Ok(format!(
        "best of {} models on {} test issues: {} MAE {:.4} SA {}",
        reports.len(),
        keys.len(),
        best.model,
        best.mae,
        best.sa.map(|s| format!("{s:.2}")).unwrap_or_else(|| "-".into())
    ))
}

pub fn cross_project(cfg: &RunConfig, a: CrossProjectArgs) -> anyhow::Result<String> {
    cfg.validate()?;
    let setting: RepositorySetting = a.setting.parse().map_err(usage)?;
    let dir = cfg.out_dir(a.out_dir.as_deref())?;
    let source = load_training(&a.source)?;
    let target_test = load_test(&a.target)?;

    let pretrained = if a.pretrain {
        let target = load_training(&a.target)?;
        let mut same_repository = Vec::new();
        for path in &a.unlabeled {
            same_repository.extend(read_records(path)?);
        }
        let src: Vec<IssueRecord> = source.train_and_valid().cloned().collect();
        let tgt: Vec<IssueRecord> = target.train_and_valid().cloned().collect();
        let text = transfer_pretrain_corpus(setting, &src, &tgt, &same_repository);
        let (vocab, out) = pretrain_on(&text, cfg)?;
        log::info!("pretrained on {} issues: perplexity {:.4}", text.len(), out.best_perplexity);
        Some((vocab, out.params))
    } else {
        None
    };
    let vocab = match &pretrained {
        Some((v, _)) => v.clone(),
        None => trainer::training_vocabulary(&source, cfg.model.token_mode, 1, usize::MAX)?,
    };
    let (outcome, preds) = cross_project_train(
        &source,
        &target_test,
        &cfg.model,
        &cfg.train,
        pretrained.as_ref().map(|(v, p)| (v, p)),
    )?;
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    vocab.write_file(&dir.join(VOCAB_FILE))?;
    write_text(&dir.join("train_curve.csv"), &trainer::curve_to_csv(&outcome.curve))?;
    let rows: Vec<(String, f64)> = preds.iter().map(|p| (p.issue_key.clone(), p.estimate)).collect();
    write_estimates(&dir.join("estimates.tsv"), &rows)?;

    let actual: Vec<f64> = preds.iter().map(|p| p.actual).collect();
    let rguess = random_guess_mae(
        &labels(&source.train)?,
        &actual,
        cfg.evaluation.rguess_runs,
        &mut Rng::new(cfg.seed()),
    )?;
    let report = EvalReport::new(
        "LD-RNN",
        rows.iter().map(|r| r.0.clone()).collect(),
        actual,
        rows.iter().map(|r| r.1).collect(),
        Some(rguess.mae).filter(|m| *m > 0.0),
    )?;
    write_text(&dir.join("report.tsv"), &report.to_tsv())?;
    Ok(format!(
        "cross-project ({}, pretrain {}): target MAE {:.4} SA {} over {} issues",
        a.setting,
        a.pretrain,
        report.mae,
        report.sa.map(|s| format!("{s:.2}")).unwrap_or_else(|| "-".into()),
        report.n
    ))
}

pub fn cluster_words(cfg: &RunConfig, a: ClusterArgs) -> anyhow::Result<String> {
    let (ck, vocab) = load_model(&a.checkpoint, &a.vocab)?;
    let params = ck.params()?;
    let split = load_training(&a.data)?;
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for r in split.train_and_valid() {
        for id in vocab.encode_issue(r) {
            if id != vocab.unk_id() && id != vocab.eos_id() {
                *counts.entry(id).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    // most frequent first, vocabulary order on ties
    ranked.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    ranked.truncate(a.top_words);
    if a.clusters == 0 || a.clusters > ranked.len() {
        return Err(usage(format!("--clusters must be in 1..={}", ranked.len())));
    }
    let ids: Vec<usize> = ranked.iter().map(|r| r.0).collect();
    let km = kmeans_embeddings(&params.embedding, &ids, a.clusters, &mut Rng::new(cfg.seed()))?;
    let mut rows: Vec<(usize, usize)> = km.assignments.iter().copied().zip(0..ids.len()).collect();
    rows.sort();
    let mut out = String::from("cluster\ttoken\tcount\n");
    for (c, i) in rows {
        out.push_str(&format!(
            "{c}\t{}\t{}\n",
            vocab.token(ids[i]).unwrap_or_default(),
            ranked[i].1
        ));
    }
    write_text(&a.out, &out)?;
    Ok(format!(
        "clustered {} words into {} clusters (inertia {:.4}) -> {}",
        ids.len(),
        a.clusters,
        km.inertia,
        a.out.display()
    ))
}
