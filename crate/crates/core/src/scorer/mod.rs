//! Attention biasing decoder: phrase probabilities conditioned on encoder
//! features and the per-token scores derived from them.
//!
//! A phrase `p = (p1, ..., pL)` with `pL = <eos>` is scored autoregressively,
//! `log P(p | X) = sum_t log P(p_t | <sos>, p_1..p_(t-1), X)`, and its
//! per-token score is `log P(p | X) / L`. The empty phrase makes exactly one
//! `<eos>` prediction.

pub(crate) mod network;
mod params;

pub use params::{DecoderConfig, DecoderParams, LayerParams};

use crate::error::{Error, Result};
use crate::types::{EncoderFeatures, Phrase, TokenId};
use network::{encode_memory, forward, PackedInput};

/// Phrases scored per packed forward pass in [`score_batch`].
pub const SCORE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPhrase {
    pub phrase: Phrase,
    pub log_prob: f64,
    pub per_token: f64,
}

impl ScoredPhrase {
    pub fn new(phrase: Phrase, log_prob: f64) -> Result<Self> {
        let per_token = per_token_score(log_prob, phrase.len())?;
        Ok(ScoredPhrase {
            phrase,
            log_prob,
            per_token,
        })
    }
}

pub fn per_token_score(log_prob: f64, len: usize) -> Result<f64> {
    if len == 0 {
        return Err(Error::InvalidPhrase("zero-length phrase".into()));
    }
    Ok(log_prob / len as f64)
}

/// Log-distribution over the vocabulary for the token following `prefix`,
/// which must start with `<sos>`.
pub fn next_token_logprobs(
    params: &DecoderParams,
    x: &EncoderFeatures,
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    if prefix.first() != Some(&0) {
        return Err(Error::InvalidPhrase("prefix must start with <sos>".into()));
    }
    let memory = encode_memory(params, x)?;
    let input = PackedInput::from_prefix(prefix);
    let cache = forward(params, &memory, &input)?;
    Ok(cache.logp.row(prefix.len() - 1).to_vec())
}

pub fn phrase_log_prob(params: &DecoderParams, x: &EncoderFeatures, phrase: &Phrase) -> Result<f64> {
    let memory = encode_memory(params, x)?;
    let input = PackedInput::from_phrases([phrase], 0);
    let cache = forward(params, &memory, &input)?;
    Ok(cache.segment_logp(&input)[0])
}

/// Scores every phrase against the same features. Results keep input order.
pub fn score_batch(
    params: &DecoderParams,
    x: &EncoderFeatures,
    phrases: &[Phrase],
) -> Result<Vec<ScoredPhrase>> {
    let memory = encode_memory(params, x)?;
    let mut out = Vec::with_capacity(phrases.len());
    for chunk in phrases.chunks(SCORE_CHUNK) {
        let input = PackedInput::from_phrases(chunk, 0);
        let cache = forward(params, &memory, &input)?;
        for (p, lp) in chunk.iter().zip(cache.segment_logp(&input)) {
            out.push(ScoredPhrase::new(p.clone(), lp)?);
        }
    }
    Ok(out)
}
