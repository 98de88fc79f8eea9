//! Supervised training of the full estimator with validation-based model
//! selection, inference, and source-to-target (cross-project) training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocabulary, compose_document, tokenize, IssueRecord, SplitDataset, TokenMode, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    batch_gradient, estimate_points, Checkpoint, Example, LdRnnParams, ModelConfig, Optimizer, Stage, TrainScope,
};
use crate::numerics::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Start the regressor bias at the mean training story points instead of
    /// a random draw.
    pub bias_at_train_mean: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 100,
            learning_rate: 0.01,
            decay: 0.9,
            epsilon: 1e-6,
            patience: 50,
            seed: 42,
            bias_at_train_mean: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_mae: f64,
    pub best_so_far: f64,
}

pub fn curve_to_csv(curve: &[TrainEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,valid_mae,best_so_far\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.valid_mae, e.best_so_far));
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation MAE seen.
    pub params: LdRnnParams,
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_valid_mae: f64,
    pub initial_valid_mae: f64,
    pub curve: Vec<TrainEpoch>,
    /// Set when training stopped on a non-finite loss or gradient; the
    /// returned parameters are the last good selection.
    pub aborted: Option<String>,
}

/// Vocabulary over the training and validation text only.
pub fn training_vocabulary(
    split: &SplitDataset,
    mode: TokenMode,
    min_count: usize,
    max_size: usize,
) -> Result<Vocabulary> {
    let docs: Vec<Vec<String>> = split
        .train_and_valid()
        .map(|r| tokenize(&compose_document(r), mode))
        .collect();
    build_vocabulary(&docs, min_count, max_size, mode)
}

pub fn examples(records: &[IssueRecord], vocab: &Vocabulary) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example {
            token_ids: vocab.encode_issue(r),
            target: r.points(),
        })
        .collect()
}

/// Clamped inference estimates, in input order.
pub fn predict(params: &LdRnnParams, cfg: &ModelConfig, examples: &[Example]) -> Result<Vec<f64>> {
    examples
        .par_iter()
        .map(|ex| estimate_points(&ex.token_ids, params, cfg))
        .collect()
}

pub fn mean_absolute_error(params: &LdRnnParams, cfg: &ModelConfig, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("examples"));
    }
    let preds = predict(params, cfg, examples)?;
    let total: f64 = preds.iter().zip(examples).map(|(p, ex)| (p - ex.target).abs()).sum();
    Ok(total / examples.len() as f64)
}

/// Trains on `split.train`, selecting on `split.valid`. The test partition is
/// not read.
pub fn train(
    split: &SplitDataset,
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrained: Option<&LdRnnParams>,
) -> Result<TrainOutcome> {
    if vocab.mode() != model_cfg.token_mode {
        return Err(Error::InvalidArgument(format!(
            "vocabulary is {} mode but the model expects {}",
            vocab.mode(),
            model_cfg.token_mode
        )));
    }
    let train = examples(&split.train, vocab);
    let valid = examples(&split.valid, vocab);
    train_examples(&train, &valid, vocab, model_cfg, cfg, pretrained)
}

pub fn train_examples(
    train: &[Example],
    valid: &[Example],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrained: Option<&LdRnnParams>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::EmptyInput("training or validation examples"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut params = LdRnnParams::init(model_cfg.embedding_dim, vocab.len(), &mut rng);
    if let Some(pre) = pretrained {
        params.copy_lower_layers(pre)?;
    }
    if cfg.bias_at_train_mean {
        let mean = train.iter().map(|e| e.target).sum::<f64>() / train.len() as f64;
        params.regressor_bias.set(0, 0, mean);
    }
    let mut optimizer = Optimizer::new(&params, TrainScope::Supervised, cfg.learning_rate, cfg.decay, cfg.epsilon);
    let hash = vocab.content_hash();

    let initial = mean_absolute_error(&params, model_cfg, valid)?;
    let mut best = (params.clone(), 0usize, initial);
    let mut curve = Vec::new();
    let mut stale = 0usize;
    let mut aborted = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let step = batch_gradient(&batch, &params, model_cfg, Some(&mut rng))
                .and_then(|(l, g)| optimizer.step(&mut params, &g).map(|_| l));
            match step {
                Ok(l) => loss_sum += l * batch.len() as f64,
                Err(e @ (Error::NumericOverflow(_) | Error::GradientBlowUp(_))) => {
                    aborted = Some(format!("epoch {epoch}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let valid_mae = match mean_absolute_error(&params, model_cfg, valid) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NumericOverflow(_)) => {
                aborted = Some(format!("epoch {epoch}: non-finite validation prediction"));
                break;
            }
            Err(e) => return Err(e),
        };
        if valid_mae < best.2 {
            best = (params.clone(), epoch, valid_mae);
            stale = 0;
        } else {
            stale += 1;
        }
        curve.push(TrainEpoch {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            valid_mae,
            best_so_far: best.2,
        });
        log::debug!("train epoch {epoch}: valid MAE {valid_mae:.4}");
        if stale > cfg.patience {
            break;
        }
    }
    let checkpoint = Checkpoint::new(Stage::Trained, model_cfg, &hash, &best.0);
    Ok(TrainOutcome {
        params: best.0,
        checkpoint,
        best_epoch: best.1,
        best_valid_mae: best.2,
        initial_valid_mae: initial,
        curve,
        aborted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub issue_key: String,
    pub story_points: f64,
}

/// Clamped estimates in input order. Only issue text is read.
pub fn estimate(checkpoint: &Checkpoint, vocab: &Vocabulary, issues: &[IssueRecord]) -> Result<Vec<Estimate>> {
    checkpoint.require_vocab(&vocab.content_hash())?;
    let params = checkpoint.params()?;
    let cfg = &checkpoint.config;
    issues
        .par_iter()
        .map(|r| {
            Ok(Estimate {
                issue_key: r.issue_key.clone(),
                story_points: estimate_points(&vocab.encode_issue(r), &params, cfg)?,
            })
        })
        .collect()
}

/// Which text pre-trains the lower layers when moving between projects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepositorySetting {
    /// Source and target share a repository: pre-train on both projects
    /// (plus any other projects of that repository).
    Within,
    /// Different repositories: pre-train on the source side only.
    Cross,
}

impl std::str::FromStr for RepositorySetting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(RepositorySetting::Within),
            "cross" => Ok(RepositorySetting::Cross),
            other => Err(Error::InvalidArgument(format!("unknown repository setting {other:?}"))),
        }
    }
}

/// Unlabeled pre-training text for a source → target transfer. Labels are
/// stripped so the result can never leak story points.
pub fn transfer_pretrain_corpus(
    setting: RepositorySetting,
    source: &[IssueRecord],
    target: &[IssueRecord],
    same_repository: &[IssueRecord],
) -> Vec<IssueRecord> {
    let parts: Vec<&[IssueRecord]> = match setting {
        RepositorySetting::Within => vec![source, target, same_repository],
        RepositorySetting::Cross => vec![source],
    };
    parts
        .into_iter()
        .flatten()
        .map(|r| IssueRecord {
            story_points: None,
            ..r.clone()
        })
        .collect()
}

/// Per-issue outcome on the target project.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPrediction {
    pub issue_key: String,
    pub actual: f64,
    pub estimate: f64,
    pub absolute_error: f64,
}

/// Trains on the source project's train/valid partitions with a vocabulary
/// from the source text, then estimates each `target_test` issue.
pub fn cross_project_train(
    source: &SplitDataset,
    target_test: &[IssueRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pretrained: Option<(&Vocabulary, &LdRnnParams)>,
) -> Result<(TrainOutcome, Vec<TransferPrediction>)> {
    let vocab = match pretrained {
        Some((v, _)) => v.clone(),
        None => training_vocabulary(source, model_cfg.token_mode, 1, usize::MAX)?,
    };
    let outcome = train(source, &vocab, model_cfg, cfg, pretrained.map(|(_, p)| p))?;
    let estimates = estimate(&outcome.checkpoint, &vocab, target_test)?;
    let preds = estimates
        .into_iter()
        .zip(target_test)
        .map(|(e, r)| TransferPrediction {
            issue_key: e.issue_key,
            actual: r.points(),
            estimate: e.story_points,
            absolute_error: (e.story_points - r.points()).abs(),
        })
        .collect();
    Ok((outcome, preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::split_chronological;
    use crate::synthetic::{keyword_corpus, KEYWORD_CORPUS_SIZE};

    fn small_model() -> ModelConfig {
        ModelConfig {
            embedding_dim: 10,
            rhn_depth: 2,
            ..ModelConfig::default()
        }
    }

    fn keyword_setup() -> (SplitDataset, Vocabulary) {
        let split = split_chronological(&keyword_corpus(KEYWORD_CORPUS_SIZE)).unwrap();
        let vocab = training_vocabulary(&split, TokenMode::Word, 1, usize::MAX).unwrap();
        (split, vocab)
    }

    #[test]
    fn patience_zero_stops_at_first_non_improvement() {
        let (split, vocab) = keyword_setup();
        // learning rate 0 can never improve on the initial model
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 0.0,
            patience: 0,
            ..TrainConfig::default()
        };
        let out = train(&split, &vocab, &small_model(), &cfg, None).unwrap();
        assert_eq!(out.curve.len(), 1);
        assert_eq!(out.best_epoch, 0);
        let cfg = TrainConfig { patience: 3, ..cfg };
        let out = train(&split, &vocab, &small_model(), &cfg, None).unwrap();
        assert_eq!(out.curve.len(), 4);
    }

    #[test]
    fn selected_model_is_never_worse_than_any_logged_epoch() {
        let (split, vocab) = keyword_setup();
        let cfg = TrainConfig {
            epochs: 15,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train(&split, &vocab, &small_model(), &cfg, None).unwrap();
        assert!(out.curve.iter().all(|e| out.best_valid_mae <= e.valid_mae));
        assert!(out.best_valid_mae <= out.initial_valid_mae);
        let valid = examples(&split.valid, &vocab);
        let mae = mean_absolute_error(&out.params, &small_model(), &valid).unwrap();
        assert_eq!(mae, out.best_valid_mae);
    }

    #[test]
    fn identical_seeds_give_identical_curves_and_checkpoints() {
        let (split, vocab) = keyword_setup();
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 10,
            ..TrainConfig::default()
        };
        let a = train(&split, &vocab, &small_model(), &cfg, None).unwrap();
        let b = train(&split, &vocab, &small_model(), &cfg, None).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
        let c = train(&split, &vocab, &small_model(), &TrainConfig { seed: 7, ..cfg }, None).unwrap();
        assert_ne!(a.curve, c.curve);
    }

    #[test]
    fn training_never_reads_the_test_partition() {
        let (split, vocab) = keyword_setup();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        train(&split, &vocab, &small_model(), &cfg, None).unwrap();
        assert_eq!(split.test.reads(), 0);
    }

    #[test]
    fn estimate_contract() {
        let (split, vocab) = keyword_setup();
        let cfg = ModelConfig {
            embedding_dim: 4,
            rhn_depth: 1,
            ..ModelConfig::default()
        };
        let mut params = LdRnnParams::zeros(4, vocab.len());
        params.regressor_bias.set(0, 0, 2.75);
        let ck = Checkpoint::new(Stage::Trained, &cfg, &vocab.content_hash(), &params);
        assert!(estimate(&ck, &vocab, &[]).unwrap().is_empty());
        let issues = &split.train[..3];
        let est = estimate(&ck, &vocab, issues).unwrap();
        assert!(est.iter().all(|e| e.story_points == 2.75));
        assert_eq!(est[1].issue_key, issues[1].issue_key);

        params.regressor_bias.set(0, 0, -1.0);
        let ck = Checkpoint::new(Stage::Trained, &cfg, &vocab.content_hash(), &params);
        assert!(estimate(&ck, &vocab, issues).unwrap().iter().all(|e| e.story_points == 0.0));

        let other = Vocabulary::from_tokens(
            vec!["<unk>".into(), "<eos>".into(), "x".into()],
            TokenMode::Word,
        )
        .unwrap();
        assert!(matches!(estimate(&ck, &other, issues), Err(Error::VocabularyMismatch { .. })));
    }

    #[test]
    fn repository_setting_changes_only_the_pretraining_text() {
        let all = keyword_corpus(12);
        let (src, tgt, rest) = (&all[..4], &all[4..8], &all[8..]);
        let within = transfer_pretrain_corpus(RepositorySetting::Within, src, tgt, rest);
        let cross = transfer_pretrain_corpus(RepositorySetting::Cross, src, tgt, rest);
        assert_eq!(within.len(), 12);
        assert_eq!(cross.len(), 4);
        assert!(within.iter().chain(&cross).all(|r| r.story_points.is_none()));
    }

    #[test]
    fn validates_configs() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
