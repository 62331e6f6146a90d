//! Phrase sampling, the log and discriminative losses, their gradients and
//! the training loop for the biasing decoder.

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::network::{backward, encode_memory, forward, PackedInput};
use crate::scorer::{DecoderConfig, DecoderParams};
use crate::types::{label_empty, label_phrase, Phrase, PhraseLabel, Utterance, Vocab};

/// Phrases drawn from each utterance's transcript when building a pool.
pub const POOL_PHRASES_PER_UTTERANCE: usize = 3;
/// Longest sampled phrase, in words.
pub const MAX_PHRASE_WORDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub phrases_per_utterance: usize,
    /// Share of batches assembled from other utterances' phrases only, so
    /// the empty phrase sees positive labels.
    pub negative_batch_rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub minibatch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_scale: f64,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub memory_context: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.9,
            phrases_per_utterance: 32,
            negative_batch_rate: 0.25,
            epochs: 30,
            learning_rate: 1e-3,
            seed: 0,
            minibatch: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_scale: 0.1,
            model_dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            memory_context: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if self.phrases_per_utterance < 2 {
            return Err(Error::Config("phrases_per_utterance must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.negative_batch_rate) {
            return Err(Error::Config("negative_batch_rate outside [0, 1]".into()));
        }
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch must be positive".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn decoder_config(&self, vocab_size: usize, feature_dim: usize) -> DecoderConfig {
        DecoderConfig {
            vocab_size,
            feature_dim,
            model_dim: self.model_dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            memory_context: self.memory_context,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub phrase: Phrase,
    /// Index of the source utterance within the minibatch.
    pub source: usize,
}

/// Draws three phrases of one to three consecutive words from every
/// transcript, uniformly over the valid `(start, length)` windows.
pub fn sample_phrase_pool<R: Rng>(
    minibatch: &[&Utterance],
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Vec<PoolEntry>> {
    let mut pool = Vec::with_capacity(minibatch.len() * POOL_PHRASES_PER_UTTERANCE);
    for (source, utt) in minibatch.iter().enumerate() {
        let windows = phrase_windows(utt.words.len());
        if windows.is_empty() {
            return Err(Error::InvalidPhrase(format!(
                "utterance {} has an empty transcript",
                utt.id
            )));
        }
        for _ in 0..POOL_PHRASES_PER_UTTERANCE {
            let &(start, len) = windows.choose(rng).expect("nonempty");
            let phrase = Phrase::new(&utt.words[start..start + len], vocab)?;
            pool.push(PoolEntry { phrase, source });
        }
    }
    Ok(pool)
}

/// Every `(start, length)` with `1 <= length <= 3` that fits in `n` words.
pub fn phrase_windows(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for len in 1..=MAX_PHRASE_WORDS.min(n) {
        for start in 0..=n - len {
            out.push((start, len));
        }
    }
    out
}

/// Sampled phrases for one utterance. `labels[0]` belongs to the implicit
/// empty phrase; `labels[i]` to `phrases[i - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseBatch {
    pub phrases: Vec<Phrase>,
    pub labels: Vec<PhraseLabel>,
}

impl PhraseBatch {
    /// Labels every phrase against the transcript and derives the empty label.
    pub fn labeled(phrases: Vec<Phrase>, utt: &Utterance) -> Self {
        let mut labels = Vec::with_capacity(phrases.len() + 1);
        let others: Vec<PhraseLabel> = phrases.iter().map(|p| label_phrase(p, utt)).collect();
        labels.push(label_empty(&others));
        labels.extend(others);
        PhraseBatch { phrases, labels }
    }
}

/// One phrase from the utterance's own pool entries plus distractors from the
/// other utterances. Distractors are drawn without replacement when the pool
/// has enough of them and with replacement otherwise.
pub fn assemble_batch<R: Rng>(
    index: usize,
    utt: &Utterance,
    pool: &[PoolEntry],
    phrases_per_utterance: usize,
    rng: &mut R,
) -> Result<PhraseBatch> {
    let own: Vec<&PoolEntry> = pool.iter().filter(|e| e.source == index).collect();
    let mut others: Vec<&PoolEntry> = pool.iter().filter(|e| e.source != index).collect();
    let first = own.choose(rng).ok_or_else(|| {
        Error::InvalidPhrase(format!("no pool phrase from utterance {}", utt.id))
    })?;
    let mut phrases = Vec::with_capacity(phrases_per_utterance);
    phrases.push(first.phrase.clone());
    if others.is_empty() {
        others = own;
    }
    draw_into(&mut phrases, &others, phrases_per_utterance - 1, rng);
    Ok(PhraseBatch::labeled(phrases, utt))
}

/// Like [`assemble_batch`] but without the guaranteed own phrase: all
/// phrases come from other utterances, so the batch is usually all
/// distractors and the empty phrase is the positive. Falls back to
/// [`assemble_batch`] when no other utterance contributed to the pool.
pub fn assemble_negative_batch<R: Rng>(
    index: usize,
    utt: &Utterance,
    pool: &[PoolEntry],
    phrases_per_utterance: usize,
    rng: &mut R,
) -> Result<PhraseBatch> {
    let others: Vec<&PoolEntry> = pool.iter().filter(|e| e.source != index).collect();
    if others.is_empty() {
        return assemble_batch(index, utt, pool, phrases_per_utterance, rng);
    }
    let mut phrases = Vec::with_capacity(phrases_per_utterance);
    draw_into(&mut phrases, &others, phrases_per_utterance, rng);
    Ok(PhraseBatch::labeled(phrases, utt))
}

fn draw_into<R: Rng>(out: &mut Vec<Phrase>, from: &[&PoolEntry], wanted: usize, rng: &mut R) {
    if from.len() >= wanted {
        out.extend(from.choose_multiple(rng, wanted).map(|e| e.phrase.clone()));
    } else {
        for _ in 0..wanted {
            out.push(from.choose(rng).expect("nonempty").phrase.clone());
        }
    }
}

/// `-sum_{i>=1} l_i log P(p_i | X)`. Both slices are indexed with the empty
/// phrase at 0, which does not contribute.
pub fn log_loss(log_probs: &[f64], labels: &[PhraseLabel]) -> f64 {
    -log_probs
        .iter()
        .zip(labels)
        .skip(1)
        .map(|(lp, l)| l.value() * lp)
        .sum::<f64>()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-sum_{i>=0} l_i log softmax(s)_i` over all phrases including the empty one.
pub fn disc_loss(scores: &[f64], labels: &[PhraseLabel]) -> f64 {
    let lse = log_sum_exp(scores);
    -scores
        .iter()
        .zip(labels)
        .map(|(s, l)| l.value() * (s - lse))
        .sum::<f64>()
}

/// `d disc_loss / d s_i = softmax(s)_i * sum_j l_j - l_i`
pub fn disc_loss_grad(scores: &[f64], labels: &[PhraseLabel]) -> Vec<f64> {
    let lse = log_sum_exp(scores);
    let total: f64 = labels.iter().map(|l| l.value()).sum();
    scores
        .iter()
        .zip(labels)
        .map(|(s, l)| (s - lse).exp() * total - l.value())
        .collect()
}

pub fn combined_loss(log: f64, disc: f64, beta: f64) -> f64 {
    (1.0 - beta) * log + beta * disc
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub log: f64,
    pub disc: f64,
    pub combined: f64,
}

/// Loss of one utterance's batch, with the log-probabilities and per-token
/// scores of `[p0, p1, .., pM]`.
pub struct BatchLoss {
    pub loss: LossBreakdown,
    pub log_probs: Vec<f64>,
    pub scores: Vec<f64>,
}

fn batch_phrases<'a>(batch: &'a PhraseBatch, empty: &'a Phrase) -> Vec<&'a Phrase> {
    std::iter::once(empty).chain(&batch.phrases).collect()
}

fn evaluate_batch(log_probs: Vec<f64>, lens: &[usize], labels: &[PhraseLabel], beta: f64) -> BatchLoss {
    let scores: Vec<f64> = log_probs
        .iter()
        .zip(lens)
        .map(|(lp, &l)| lp / l as f64)
        .collect();
    let log = log_loss(&log_probs, labels);
    let disc = disc_loss(&scores, labels);
    BatchLoss {
        loss: LossBreakdown {
            log,
            disc,
            combined: combined_loss(log, disc, beta),
        },
        log_probs,
        scores,
    }
}

/// Forward-only loss, used for finite-difference checks and evaluation.
pub fn batch_loss(
    params: &DecoderParams,
    x: &crate::types::EncoderFeatures,
    batch: &PhraseBatch,
    beta: f64,
) -> Result<BatchLoss> {
    check_batch(batch)?;
    let empty = Phrase::from_tokens(vec![], vec![1])?;
    let phrases = batch_phrases(batch, &empty);
    let memory = encode_memory(params, x)?;
    let input = PackedInput::from_phrases(phrases.iter().copied(), 0);
    let cache = forward(params, &memory, &input)?;
    let lens: Vec<usize> = phrases.iter().map(|p| p.len()).collect();
    Ok(evaluate_batch(
        cache.segment_logp(&input),
        &lens,
        &batch.labels,
        beta,
    ))
}

fn check_batch(batch: &PhraseBatch) -> Result<()> {
    if batch.phrases.is_empty() || batch.labels.len() != batch.phrases.len() + 1 {
        return Err(Error::InvalidPhrase(format!(
            "batch has {} phrases and {} labels",
            batch.phrases.len(),
            batch.labels.len()
        )));
    }
    Ok(())
}

/// Analytic gradient of the combined loss with respect to every parameter.
pub fn loss_gradients(
    params: &DecoderParams,
    x: &crate::types::EncoderFeatures,
    batch: &PhraseBatch,
    beta: f64,
) -> Result<(BatchLoss, DecoderParams)> {
    let mut grads = params.zeros_like();
    let loss = accumulate_gradients(params, x, batch, beta, 1.0, &mut grads)?;
    if !grads.is_finite() {
        return Err(Error::numerical("loss gradients"));
    }
    Ok((loss, grads))
}

/// Adds `scale * d loss / d params` into `grads`.
pub fn accumulate_gradients(
    params: &DecoderParams,
    x: &crate::types::EncoderFeatures,
    batch: &PhraseBatch,
    beta: f64,
    scale: f64,
    grads: &mut DecoderParams,
) -> Result<BatchLoss> {
    check_batch(batch)?;
    let empty = Phrase::from_tokens(vec![], vec![1])?;
    let phrases = batch_phrases(batch, &empty);
    let memory = encode_memory(params, x)?;
    let input = PackedInput::from_phrases(phrases.iter().copied(), 0);
    let cache = forward(params, &memory, &input)?;
    let lens: Vec<usize> = phrases.iter().map(|p| p.len()).collect();
    let loss = evaluate_batch(cache.segment_logp(&input), &lens, &batch.labels, beta);

    // d loss / d log P(p_i | X) per phrase
    let ds = disc_loss_grad(&loss.scores, &batch.labels);
    let mut row_weights = vec![0.0; input.rows()];
    for (i, seg) in input.segments.iter().enumerate() {
        let log_part = if i == 0 {
            0.0
        } else {
            -(1.0 - beta) * batch.labels[i].value()
        };
        let w = scale * (log_part + beta * ds[i] / lens[i] as f64);
        row_weights[seg.clone()].fill(w);
    }
    backward(params, x, &memory, &input, &cache, &row_weights, grads);
    Ok(loss)
}

struct Adam {
    m: DecoderParams,
    v: DecoderParams,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(params: &DecoderParams, cfg: &TrainConfig) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    fn step(&mut self, params: &mut DecoderParams, grads: &DecoderParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut().into_iter().zip(self.v.blocks_mut()))
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub log: f64,
    pub disc: f64,
    pub combined: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: DecoderParams,
    pub trace: Vec<EpochLoss>,
}

pub fn train(corpus: &[Utterance], vocab: &Vocab, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(corpus, vocab, config, |_| {})
}

/// Trains from a fresh seeded initialization, calling `on_epoch` after every
/// epoch. The loss trace holds per-epoch means over utterances.
pub fn train_with_progress(
    corpus: &[Utterance],
    vocab: &Vocab,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = corpus
        .first()
        .ok_or_else(|| Error::Config("training corpus is empty".into()))?;
    let dcfg = config.decoder_config(vocab.len(), first.features.dim());
    let mut params = DecoderParams::init(dcfg, config.seed, config.init_scale)?;
    let mut adam = Adam::new(&params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for chunk in order.chunks(config.minibatch) {
            let members: Vec<&Utterance> = chunk.iter().map(|&i| &corpus[i]).collect();
            let pool = sample_phrase_pool(&members, vocab, &mut rng)?;
            let mut grads = params.zeros_like();
            let scale = 1.0 / members.len() as f64;
            for (k, utt) in members.iter().enumerate() {
                let batch = if rng.random_bool(config.negative_batch_rate) {
                    assemble_negative_batch(k, utt, &pool, config.phrases_per_utterance, &mut rng)?
                } else {
                    assemble_batch(k, utt, &pool, config.phrases_per_utterance, &mut rng)?
                };
                let loss =
                    accumulate_gradients(&params, &utt.features, &batch, config.beta, scale, &mut grads)?;
                sum.log += loss.loss.log;
                sum.disc += loss.loss.disc;
                sum.combined += loss.loss.combined;
            }
            if !grads.is_finite() {
                return Err(Error::Diverged { epoch, trace });
            }
            adam.step(&mut params, &grads, config.learning_rate);
        }
        let n = corpus.len() as f64;
        let record = EpochLoss {
            epoch,
            log: sum.log / n,
            disc: sum.disc / n,
            combined: sum.combined / n,
        };
        trace.push(record);
        on_epoch(&record);
        if !record.combined.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch, trace });
        }
    }
    Ok(TrainOutcome { params, trace })
}
