//! Unsupervised next-token pre-training of the embedding and LSTM layers.
//!
//! Training uses noise-contrastive estimation (or the full softmax, kept as
//! a reference objective). Model selection and early stopping always use
//! full-softmax perplexity on a held-back tail of the corpus.

use rand::distr::{weighted::WeightedIndex, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{IssueRecord, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{
    accumulate_embedding, embed, lstm_backward, lstm_encode, Gradients, LdRnnParams, Optimizer, TokenRows,
    TrainScope,
};
use crate::numerics::{dot, log_sigmoid, log_sum_exp, sigmoid, softmax_in_place, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Nce,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Noise samples per predicted token.
    pub nce_samples: usize,
    /// Exponent applied to unigram counts to form the noise law.
    pub noise_power: f64,
    pub objective: Objective,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Fraction of sequences (taken from the end) used for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 100,
            batch_size: 50,
            learning_rate: 0.02,
            decay: 0.99,
            epsilon: 1e-7,
            nce_samples: 100,
            noise_power: 0.75,
            objective: Objective::Nce,
            patience: 10,
            validation_fraction: 0.1,
            seed: 42,
        }
    }
}

/// Encodes the text of every record; story points are never read.
pub fn lm_sequences(records: &[IssueRecord], vocab: &Vocabulary) -> Vec<Vec<usize>> {
    records.iter().map(|r| vocab.encode_issue(r)).collect()
}

/// `log P(k | h) = U_k·h − log Σ_k' exp(U_k'·h)`
pub fn next_token_logprob(h: &[f64], lm_output: &Matrix, k: usize) -> Result<f64> {
    if k >= lm_output.rows() {
        return Err(Error::IdOutOfRange {
            id: k,
            size: lm_output.rows(),
        });
    }
    let logits = lm_output.matvec(h);
    Ok(logits[k] - log_sum_exp(&logits))
}

/// Smoothed unigram noise distribution `q(w) ∝ count(w)^power`.
#[derive(Clone, Debug)]
pub struct NoiseDistribution {
    probs: Vec<f64>,
    sampler: WeightedIndex<f64>,
}

impl NoiseDistribution {
    pub fn from_counts(counts: &[f64], power: f64) -> Result<Self> {
        let weights: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { c.powf(power) } else { 0.0 }).collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::EmptyCorpus);
        }
        let sampler = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
        Ok(NoiseDistribution {
            probs: weights.iter().map(|w| w / total).collect(),
            sampler,
        })
    }

    /// Counts every prediction target (each token after the first) in
    /// `sequences`, plus one for every vocabulary entry. Without the extra
    /// count a token that never occurs as a target is never drawn as noise,
    /// so nothing pushes its score down and the softmax mass it keeps
    /// inflates perplexity.
    pub fn from_sequences(sequences: &[Vec<usize>], vocab_size: usize, power: f64) -> Result<Self> {
        let mut counts = vec![1.0; vocab_size];
        for s in sequences {
            for &id in s.iter().skip(1) {
                counts[id] += 1.0;
            }
        }
        Self::from_counts(&counts, power)
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.probs[k]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, m: usize, rng: &mut Rng) -> Vec<usize> {
        (0..m).map(|_| self.sampler.sample(rng)).collect()
    }
}

/// Loss and gradients of one next-token prediction.
#[derive(Clone, Debug)]
pub struct TokenLoss {
    pub loss: f64,
    pub d_h: Vec<f64>,
    /// Gradient rows of the output matrix, one entry per touched token.
    pub d_rows: TokenRows,
}

fn add_row(rows: &mut TokenRows, k: usize, coef: f64, h: &[f64]) {
    let e = rows.entry(k).or_insert_with(|| vec![0.0; h.len()]);
    for (a, b) in e.iter_mut().zip(h) {
        *a += coef * b;
    }
}

/// Binary NCE objective: the target against `noise_ids` drawn from `noise`.
///
/// With score `s(w) = U_w·h − ln(M·q(w))` the loss is
/// `−log σ(s(target)) − Σ_j log σ(−s(noise_j))`. Only the rows of the target
/// and the sampled noise tokens receive gradient.
pub fn nce_loss(
    h: &[f64],
    lm_output: &Matrix,
    target: usize,
    noise_ids: &[usize],
    noise: &NoiseDistribution,
) -> TokenLoss {
    let m = noise_ids.len() as f64;
    let score = |w: usize| dot(lm_output.row(w), h) - (m * noise.prob(w).max(1e-300)).ln();
    let mut d_h = vec![0.0; h.len()];
    let mut d_rows = TokenRows::new();

    let s = score(target);
    let mut loss = -log_sigmoid(s);
    let coef = sigmoid(s) - 1.0;
    add_row(&mut d_rows, target, coef, h);
    for (o, u) in d_h.iter_mut().zip(lm_output.row(target)) {
        *o += coef * u;
    }
    for &j in noise_ids {
        let s = score(j);
        loss -= log_sigmoid(-s);
        let coef = sigmoid(s);
        add_row(&mut d_rows, j, coef, h);
        for (o, u) in d_h.iter_mut().zip(lm_output.row(j)) {
            *o += coef * u;
        }
    }
    TokenLoss { loss, d_h, d_rows }
}

/// Full-softmax negative log likelihood of `target`.
pub fn softmax_loss(h: &[f64], lm_output: &Matrix, target: usize) -> TokenLoss {
    let mut p = lm_output.matvec(h);
    let lse = log_sum_exp(&p);
    let loss = lse - p[target];
    softmax_in_place(&mut p);
    p[target] -= 1.0;
    let mut d_h = vec![0.0; h.len()];
    lm_output.matvec_t_acc(&p, &mut d_h);
    let mut d_rows = TokenRows::new();
    for (k, &coef) in p.iter().enumerate() {
        add_row(&mut d_rows, k, coef, h);
    }
    TokenLoss { loss, d_h, d_rows }
}

fn predictions(sequences: &[Vec<usize>]) -> usize {
    sequences.iter().map(|s| s.len().saturating_sub(1)).sum()
}

/// `exp` of the mean per-token negative log likelihood under the full softmax.
pub fn perplexity(params: &LdRnnParams, corpus: &[Vec<usize>]) -> Result<f64> {
    let n = predictions(corpus);
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let per_seq: Vec<Result<f64>> = corpus
        .par_iter()
        .map(|ids| {
            if ids.len() < 2 {
                return Ok(0.0);
            }
            let inputs = embed(&ids[..ids.len() - 1], &params.embedding)?;
            let trace = lstm_encode(&inputs, &params.lstm, None);
            let mut nll = 0.0;
            for (h, &next) in trace.outputs.iter().zip(&ids[1..]) {
                nll -= next_token_logprob(h, &params.lm_output, next)?;
            }
            Ok(nll)
        })
        .collect();
    let mut total = 0.0;
    for r in per_seq {
        total += r?;
    }
    Ok((total / n as f64).exp())
}

/// Language-model loss and gradient of one sequence; every position predicts
/// its successor. `noise_ids[t]` holds the samples for position `t`.
pub fn sequence_lm_gradient(
    ids: &[usize],
    params: &LdRnnParams,
    objective: Objective,
    noise: Option<&NoiseDistribution>,
    noise_ids: &[Vec<usize>],
    scale: f64,
) -> Result<(f64, Gradients)> {
    let d = params.dim();
    let mut g = Gradients::zeros(d);
    if ids.len() < 2 {
        return Ok((0.0, g));
    }
    let inputs = embed(&ids[..ids.len() - 1], &params.embedding)?;
    let trace = lstm_encode(&inputs, &params.lstm, None);
    let mut total = 0.0;
    let mut d_outputs = Vec::with_capacity(inputs.len());
    for (t, (h, &next)) in trace.outputs.iter().zip(&ids[1..]).enumerate() {
        let tl = match objective {
            Objective::Nce => nce_loss(
                h,
                &params.lm_output,
                next,
                &noise_ids[t],
                noise.expect("NCE requires a noise distribution"),
            ),
            Objective::Softmax => softmax_loss(h, &params.lm_output, next),
        };
        total += tl.loss;
        for (k, row) in tl.d_rows {
            let dst = g.lm_output.entry(k).or_insert_with(|| vec![0.0; d]);
            for (a, b) in dst.iter_mut().zip(row) {
                *a += scale * b;
            }
        }
        d_outputs.push(tl.d_h.into_iter().map(|x| x * scale).collect::<Vec<_>>());
    }
    let d_inputs = lstm_backward(&trace, &params.lstm, &d_outputs, None, &mut g.lstm);
    accumulate_embedding(&mut g.embedding, &ids[..ids.len() - 1], &d_inputs);
    if !total.is_finite() || !g.is_finite() {
        return Err(Error::NumericOverflow("language-model gradient".into()));
    }
    Ok((total, g))
}

/// One epoch of the pre-training curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_perplexity: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters of the epoch with the lowest validation perplexity.
    pub params: LdRnnParams,
    pub best_epoch: usize,
    pub best_perplexity: f64,
    /// Validation perplexity of `init`; best epoch 0 means it was never beaten.
    pub initial_perplexity: f64,
    pub curve: Vec<PretrainEpoch>,
}

/// Delimited per-epoch log: `epoch,train_loss,valid_perplexity,best_so_far`.
pub fn curve_to_csv(curve: &[PretrainEpoch]) -> String {
    let mut s = String::from("epoch,train_loss,valid_perplexity,best_so_far\n");
    for e in curve {
        s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, e.valid_perplexity, e.best_so_far));
    }
    s
}

/// Splits sequences into (train, validation); validation is the last
/// `ceil(fraction·n)` sequences, at least one.
pub fn validation_split(sequences: &[Vec<usize>], fraction: f64) -> Result<(&[Vec<usize>], &[Vec<usize>])> {
    if sequences.len() < 2 {
        return Err(Error::InvalidArgument(
            "pre-training needs at least two sequences (train and validation)".into(),
        ));
    }
    let n_valid = ((sequences.len() as f64 * fraction).ceil() as usize).clamp(1, sequences.len() - 1);
    Ok(sequences.split_at(sequences.len() - n_valid))
}

/// Runs next-token pre-training from `init` and returns the best parameters.
pub fn pretrain(sequences: &[Vec<usize>], init: LdRnnParams, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    let vocab_size = init.vocab_size();
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if cfg.objective == Objective::Nce && (cfg.nce_samples == 0 || cfg.nce_samples > vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "nce_samples must be in 1..={vocab_size}, got {}",
            cfg.nce_samples
        )));
    }
    if let Some(&bad) = sequences.iter().flatten().find(|&&id| id >= vocab_size) {
        return Err(Error::IdOutOfRange { id: bad, size: vocab_size });
    }
    let (train, valid) = validation_split(sequences, cfg.validation_fraction)?;
    let noise = match cfg.objective {
        Objective::Nce => Some(NoiseDistribution::from_sequences(train, vocab_size, cfg.noise_power)?),
        Objective::Softmax => None,
    };
    let mut rng = Rng::new(cfg.seed);
    let mut params = init;
    let mut optimizer = Optimizer::new(&params, TrainScope::LanguageModel, cfg.learning_rate, cfg.decay, cfg.epsilon);

    let initial = perplexity(&params, valid)?;
    let mut best = (params.clone(), 0usize, initial);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_preds = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Vec<usize>> = chunk.iter().map(|&i| &train[i]).collect();
            let n_pred = batch.iter().map(|s| s.len().saturating_sub(1)).sum::<usize>();
            if n_pred == 0 {
                continue;
            }
            let samples: Vec<Vec<Vec<usize>>> = batch
                .iter()
                .map(|s| match &noise {
                    Some(q) => (1..s.len()).map(|_| q.sample(cfg.nce_samples, &mut rng)).collect(),
                    None => Vec::new(),
                })
                .collect();
            let scale = 1.0 / n_pred as f64;
            let parts: Vec<Result<(f64, Gradients)>> = batch
                .par_iter()
                .zip(samples.par_iter())
                .map(|(ids, s)| sequence_lm_gradient(ids, &params, cfg.objective, noise.as_ref(), s, scale))
                .collect();
            let mut grads = Gradients::zeros(params.dim());
            for p in parts {
                let (l, g) = p?;
                epoch_loss += l;
                grads.add_assign(&g);
            }
            epoch_preds += n_pred;
            optimizer.step(&mut params, &grads)?;
        }
        let ppl = perplexity(&params, valid)?;
        if ppl < best.2 {
            best = (params.clone(), epoch, ppl);
            stale = 0;
        } else {
            stale += 1;
        }
        curve.push(PretrainEpoch {
            epoch,
            train_loss: epoch_loss / epoch_preds.max(1) as f64,
            valid_perplexity: ppl,
            best_so_far: best.2,
        });
        log::debug!("pretrain epoch {epoch}: valid perplexity {ppl:.4}");
        if stale > cfg.patience {
            break;
        }
    }
    Ok(PretrainOutcome {
        params: best.0,
        best_epoch: best.1,
        best_perplexity: best.2,
        initial_perplexity: initial,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    #[test]
    fn zero_output_weights_give_uniform_logprob() {
        let u = Matrix::zeros(7, 3);
        for k in 0..7 {
            let lp = next_token_logprob(&[0.3, -1.0, 2.0], &u, k).unwrap();
            assert!((lp - (1.0f64 / 7.0).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn logprob_matches_brute_force_softmax() {
        let mut rng = Rng::new(17);
        let u = Matrix::uniform(7, 4, 2.0, &mut rng);
        let h = [0.5, -0.25, 1.5, 0.1];
        let exps: Vec<f64> = (0..7).map(|k| dot(u.row(k), &h).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut total = 0.0;
        for (k, e) in exps.iter().enumerate() {
            let lp = next_token_logprob(&h, &u, k).unwrap();
            assert!((lp - (e / z).ln()).abs() < 1e-12);
            total += lp.exp();
        }
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn nce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(23);
        let (d, v) = (5, 11);
        let u = Matrix::uniform(v, d, 0.8, &mut rng);
        let h = Matrix::uniform(1, d, 1.0, &mut rng);
        let counts: Vec<f64> = (0..v).map(|k| 1.0 + k as f64).collect();
        let noise = NoiseDistribution::from_counts(&counts, 0.75).unwrap();
        let ids = noise.sample(6, &mut rng);
        let out = nce_loss(h.as_slice(), &u, 3, &ids, &noise);

        let dh = Matrix::from_vec(1, d, out.d_h.clone()).unwrap();
        let err = grad_check(|p| nce_loss(p.as_slice(), &u, 3, &ids, &noise).loss, &h, &dh, 1e-5);
        assert!(err < 1e-4, "d_h error {err}");

        let mut du = Matrix::zeros(v, d);
        for (&k, row) in &out.d_rows {
            du.row_mut(k).copy_from_slice(row);
        }
        let err = grad_check(|p| nce_loss(h.as_slice(), p, 3, &ids, &noise).loss, &u, &du, 1e-5);
        assert!(err < 1e-4, "d_U error {err}");
    }

    #[test]
    fn nce_touches_only_target_and_noise_rows() {
        let mut rng = Rng::new(1);
        let u = Matrix::uniform(50, 4, 0.5, &mut rng);
        let noise = NoiseDistribution::from_counts(&vec![1.0; 50], 0.75).unwrap();
        let ids = vec![7, 9, 9];
        let out = nce_loss(&[0.1, 0.2, 0.3, 0.4], &u, 2, &ids, &noise);
        assert_eq!(out.d_rows.keys().copied().collect::<Vec<_>>(), vec![2, 7, 9]);
    }

    #[test]
    fn noise_law_covers_every_token() {
        let q = NoiseDistribution::from_sequences(&[vec![2, 3, 3, 1]], 5, 0.75).unwrap();
        let w = |c: f64| c.powf(0.75);
        let z = w(1.0) * 3.0 + w(2.0) + w(3.0);
        assert!((q.prob(0) - w(1.0) / z).abs() < 1e-15);
        assert!((q.prob(3) - w(3.0) / z).abs() < 1e-15);
        assert!((q.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut rng = Rng::new(29);
        let u = Matrix::uniform(6, 3, 1.0, &mut rng);
        let h = Matrix::uniform(1, 3, 1.0, &mut rng);
        let out = softmax_loss(h.as_slice(), &u, 4);
        let dh = Matrix::from_vec(1, 3, out.d_h.clone()).unwrap();
        assert!(grad_check(|p| softmax_loss(p.as_slice(), &u, 4).loss, &h, &dh, 1e-5) < 1e-5);
    }

    #[test]
    fn uniform_model_perplexity_equals_vocab_size() {
        let params = LdRnnParams::zeros(3, 70);
        let corpus = vec![vec![5, 9, 12, 1], vec![3, 1]];
        let ppl = perplexity(&params, &corpus).unwrap();
        assert!((ppl - 70.0).abs() < 1e-9);
        assert!(perplexity(&params, &[vec![1]]).is_err());
        assert!(perplexity(&params, &[]).is_err());
    }

    #[test]
    fn perplexity_hand_oracle() {
        // Zero input/recurrent weights: gates are pure functions of their
        // biases, and a closed forget gate makes every step see the same state.
        let mut params = LdRnnParams::zeros(1, 3);
        params.lstm.candidate.bias.set(0, 0, 10.0);
        params.lstm.output_gate.bias.set(0, 0, 50.0);
        params.lstm.forget_gate.bias.set(0, 0, -50.0);
        params.lm_output = Matrix::from_vec(3, 1, vec![0.0, (2.0f64).ln(), (3.0f64).ln()]).unwrap();
        let c = 0.5 * (10.0f64).tanh();
        let h = sigmoid(50.0) * c.tanh();
        let logits = [0.0, (2.0f64).ln() * h, (3.0f64).ln() * h];
        let lse = log_sum_exp(&logits);
        let seq = vec![0usize, 2, 1, 2, 0, 1];
        let nll: f64 = seq[1..].iter().map(|&k| lse - logits[k]).sum();
        let oracle = (nll / 5.0).exp();
        let ppl = perplexity(&params, &[seq]).unwrap();
        assert!((ppl - oracle).abs() < 1e-9, "{ppl} vs {oracle}");
    }

    #[test]
    fn perfect_predictions_approach_perplexity_one() {
        // U rows large along h so the next token dominates
        let mut params = LdRnnParams::zeros(1, 2);
        params.lstm.candidate.bias.set(0, 0, 50.0);
        params.lstm.output_gate.bias.set(0, 0, 50.0);
        params.lm_output = Matrix::from_vec(2, 1, vec![0.0, 1e3]).unwrap();
        let ppl = perplexity(&params, &[vec![0, 1, 1, 1]]).unwrap();
        assert!((ppl - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let mut rng = Rng::new(3);
        let init = LdRnnParams::init(4, 6, &mut rng);
        let seqs = vec![vec![2, 3, 4, 1]; 5];
        let cfg = PretrainConfig {
            epochs: 0,
            nce_samples: 3,
            ..PretrainConfig::default()
        };
        let out = pretrain(&seqs, init.clone(), &cfg).unwrap();
        assert_eq!(out.params, init);
        assert!(out.curve.is_empty());
        assert_eq!(out.best_epoch, 0);
    }

    #[test]
    fn rejects_more_noise_samples_than_tokens() {
        let init = LdRnnParams::zeros(2, 4);
        let cfg = PretrainConfig {
            nce_samples: 5,
            ..PretrainConfig::default()
        };
        assert!(pretrain(&[vec![2, 1], vec![3, 1]], init, &cfg).is_err());
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let seqs: Vec<Vec<usize>> = (0..25).map(|i| vec![i]).collect();
        let (tr, va) = validation_split(&seqs, 0.1).unwrap();
        assert_eq!(tr.len(), 22);
        assert_eq!(va[0], vec![22]);
        assert!(validation_split(&seqs[..1], 0.1).is_err());
    }
}
