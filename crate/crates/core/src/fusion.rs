//! Phrase filtering, per-utterance bonus and shallow-fusion beam search.
//!
//! A phrase is kept when `tol + s_i - s_0 >= 0`, and the utterance bonus is
//! the largest such margin. During search every hypothesis carries its
//! partial-match state against the kept phrases. The bias part of a
//! hypothesis score is always `bonus * (completed_total + max partial)`: the
//! partial term is pending and disappears when the match dies or the
//! hypothesis ends, the completed term is vested.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcher::{build_table, step, MatchState, PartialMatchTable};
use crate::scorer::{score_batch, DecoderParams, ScoredPhrase};
use crate::types::{detokenize, Phrase, TokenId, Utterance, Vocab};

/// Candidate expansions proposed per hypothesis before pruning.
pub const DEFAULT_EXPANSIONS: usize = 30;
pub const DEFAULT_BEAM: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub kept: Vec<usize>,
    pub bonus: f64,
    pub tol: f64,
    pub s0: f64,
}

/// Keeps phrase `i` (0-based into `scored`) iff `tol + s_i - s0 >= 0`.
pub fn filter_phrases(scored: &[ScoredPhrase], s0: f64, tol: f64) -> Result<FilterResult> {
    let scores: Vec<f64> = scored.iter().map(|s| s.per_token).collect();
    filter_scores(&scores, s0, tol)
}

pub fn filter_scores(scores: &[f64], s0: f64, tol: f64) -> Result<FilterResult> {
    if !(tol >= 0.0) || !tol.is_finite() {
        return Err(Error::Config(format!("tol must be finite and >= 0, got {tol}")));
    }
    let mut kept = Vec::new();
    let mut bonus = 0.0f64;
    for (i, &s) in scores.iter().enumerate() {
        let margin = tol + s - s0;
        if margin >= 0.0 {
            kept.push(i);
            bonus = bonus.max(margin);
        }
    }
    Ok(FilterResult {
        kept,
        bonus,
        tol,
        s0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, without the terminating `<eos>`.
    pub tokens: Vec<TokenId>,
    pub base_score: f64,
    pub vested_bias: f64,
    pub pending_bias: f64,
    pub match_state: MatchState,
    pub finished: bool,
}

impl Hypothesis {
    pub fn root(phrases: usize) -> Self {
        Hypothesis {
            tokens: Vec::new(),
            base_score: 0.0,
            vested_bias: 0.0,
            pending_bias: 0.0,
            match_state: MatchState::zero(phrases),
            finished: false,
        }
    }

    pub fn total_score(&self) -> f64 {
        self.base_score + self.vested_bias + self.pending_bias
    }

    pub fn bias_score(&self) -> f64 {
        self.vested_bias + self.pending_bias
    }
}

/// Steps the match state with `token` and recomputes both bias terms from it.
/// The base score is left untouched.
pub fn apply_bias(
    hyp: &Hypothesis,
    token: TokenId,
    tables: &[PartialMatchTable],
    bonus: f64,
) -> Hypothesis {
    let outcome = step(&hyp.match_state, tables, token);
    let mut tokens = Vec::with_capacity(hyp.tokens.len() + 1);
    tokens.extend_from_slice(&hyp.tokens);
    tokens.push(token);
    Hypothesis {
        tokens,
        base_score: hyp.base_score,
        vested_bias: bonus * outcome.state.completed_total as f64,
        pending_bias: bonus * outcome.state.max_partial() as f64,
        match_state: outcome.state,
        finished: false,
    }
}

/// Next-token model that leads the search. The distribution's `<eos>` entry
/// scores ending the utterance.
pub trait BaseScorer {
    fn vocab_size(&self) -> usize;

    fn eos_id(&self) -> TokenId {
        1
    }

    fn sos_id(&self) -> TokenId {
        0
    }

    /// Log-probabilities over the vocabulary given the emitted prefix.
    fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64>;

    /// Upper bound on useful hypothesis length, if the scorer knows one.
    fn max_len_hint(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    pub expansions: usize,
    pub max_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: DEFAULT_BEAM,
            expansions: DEFAULT_EXPANSIONS,
            max_len: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeamOutput {
    /// Ranked best first.
    pub hyps: Vec<Hypothesis>,
    /// False when no hypothesis ended within `max_len`; `hyps` then holds the
    /// best partial hypotheses.
    pub complete: bool,
}

/// Higher total first, then shorter, then lexicographically smaller tokens.
pub fn rank_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.total_score()
        .total_cmp(&a.total_score())
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then(b.finished.cmp(&a.finished))
}

fn top_expansions(logp: &[f64], k: usize, sos: TokenId) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..logp.len() as TokenId).filter(|&t| t != sos).collect();
    ids.sort_by(|&a, &b| logp[b as usize].total_cmp(&logp[a as usize]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

pub fn beam_search(
    base: &dyn BaseScorer,
    bonus: f64,
    tables: &[PartialMatchTable],
    config: &BeamConfig,
) -> Result<BeamOutput> {
    beam_search_observed(base, bonus, tables, config, |_, _| {})
}

/// Beam search that hands the surviving hypotheses of every step to
/// `observe` after pruning.
pub fn beam_search_observed(
    base: &dyn BaseScorer,
    bonus: f64,
    tables: &[PartialMatchTable],
    config: &BeamConfig,
    mut observe: impl FnMut(usize, &[Hypothesis]),
) -> Result<BeamOutput> {
    if config.beam == 0 || config.expansions == 0 {
        return Err(Error::Config("beam and expansions must be positive".into()));
    }
    let eos = base.eos_id();
    let sos = base.sos_id();
    let mut live = vec![Hypothesis::root(tables.len())];
    let mut ended: Vec<Hypothesis> = Vec::new();

    for step_index in 0..config.max_len {
        let mut candidates = Vec::with_capacity(live.len() * config.expansions);
        for hyp in &live {
            let logp = base.next_log_probs(&hyp.tokens);
            debug_assert_eq!(logp.len(), base.vocab_size());
            for tok in top_expansions(&logp, config.expansions, sos) {
                let lp = logp[tok as usize];
                let next = if tok == eos {
                    Hypothesis {
                        tokens: hyp.tokens.clone(),
                        base_score: hyp.base_score + lp,
                        vested_bias: hyp.vested_bias,
                        pending_bias: 0.0,
                        match_state: hyp.match_state.clone(),
                        finished: true,
                    }
                } else {
                    let mut h = apply_bias(hyp, tok, tables, bonus);
                    h.base_score += lp;
                    h
                };
                candidates.push(next);
            }
        }
        candidates.sort_by(rank_order);
        candidates.truncate(config.beam);
        observe(step_index, &candidates);
        live.clear();
        for c in candidates {
            if c.finished {
                ended.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    if ended.is_empty() {
        for h in &mut live {
            h.pending_bias = 0.0;
        }
        live.sort_by(rank_order);
        return Ok(BeamOutput {
            hyps: live,
            complete: false,
        });
    }
    ended.sort_by(rank_order);
    Ok(BeamOutput {
        hyps: ended,
        complete: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub id: String,
    pub hypothesis_words: Vec<String>,
    pub kept_phrases: Vec<String>,
    pub bonus: f64,
    pub s0: f64,
    pub base_score: f64,
    pub bias_score: f64,
    pub complete: bool,
    /// Per-token score of every supplied phrase, in input order.
    pub phrase_scores: Vec<f64>,
}

/// Scores the biasing list, filters it, builds match tables for the kept
/// phrases and runs biased beam search.
pub fn decode_utterance(
    utt: &Utterance,
    phrases: &[Phrase],
    params: &DecoderParams,
    base: &dyn BaseScorer,
    tol: f64,
    beam: &BeamConfig,
    vocab: &Vocab,
) -> Result<DecodeResult> {
    let mut all = Vec::with_capacity(phrases.len() + 1);
    all.push(Phrase::empty(vocab));
    all.extend_from_slice(phrases);
    let scored = score_batch(params, &utt.features, &all)?;
    let s0 = scored[0].per_token;
    let filter = filter_phrases(&scored[1..], s0, tol)?;
    decode_filtered(utt, phrases, &scored[1..], &filter, base, beam, vocab)
}

/// Search stage of [`decode_utterance`], for callers that already hold
/// scores and a filter decision.
pub fn decode_filtered(
    utt: &Utterance,
    phrases: &[Phrase],
    scored: &[ScoredPhrase],
    filter: &FilterResult,
    base: &dyn BaseScorer,
    beam: &BeamConfig,
    vocab: &Vocab,
) -> Result<DecodeResult> {
    let tables = filter
        .kept
        .iter()
        .map(|&i| build_table(&phrases[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut config = *beam;
    if let Some(hint) = base.max_len_hint() {
        config.max_len = config.max_len.min(hint);
    }
    let out = beam_search(base, filter.bonus, &tables, &config)?;
    let best = &out.hyps[0];
    Ok(DecodeResult {
        id: utt.id.clone(),
        hypothesis_words: detokenize(&best.tokens, vocab)?,
        kept_phrases: filter.kept.iter().map(|&i| phrases[i].text()).collect(),
        bonus: filter.bonus,
        s0: filter.s0,
        base_score: best.base_score,
        bias_score: best.bias_score(),
        complete: out.complete,
        phrase_scores: scored.iter().map(|s| s.per_token).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::{recompute, table_from_tokens};

    fn fr(scores: &[f64], s0: f64, tol: f64) -> FilterResult {
        filter_scores(scores, s0, tol).unwrap()
    }

    #[test]
    fn filter_examples() {
        let r = fr(&[-1.2], -1.0, 0.0);
        assert!(r.kept.is_empty());
        assert_eq!(r.bonus, 0.0);
        let r = fr(&[-1.2], -1.0, 0.5);
        assert_eq!(r.kept, [0]);
        assert!((r.bonus - 0.3).abs() < 1e-12);
        let r = fr(&[-0.5, -2.0], -1.0, 0.0);
        assert_eq!(r.kept, [0]);
        assert!((r.bonus - 0.5).abs() < 1e-12);
        assert!(filter_scores(&[0.0], 0.0, -1.0).is_err());
    }

    const A: TokenId = 2;
    const B: TokenId = 3;
    const C: TokenId = 4;

    #[test]
    fn bias_two_step_trace() {
        let tables = [table_from_tokens(&[A, B]).unwrap()];
        let h0 = Hypothesis::root(1);
        let h1 = apply_bias(&h0, A, &tables, 0.5);
        assert_eq!(h1.pending_bias, 0.5);
        assert_eq!(h1.vested_bias, 0.0);
        let h2 = apply_bias(&h1, B, &tables, 0.5);
        assert_eq!(h2.vested_bias, 1.0);
        assert_eq!(h2.pending_bias, 0.0);
    }

    #[test]
    fn dead_match_cancels_pending() {
        let tables = [table_from_tokens(&[A, B]).unwrap()];
        let h1 = apply_bias(&Hypothesis::root(1), A, &tables, 0.5);
        let h2 = apply_bias(&h1, C, &tables, 0.5);
        assert_eq!(h1.bias_score(), 0.5);
        assert_eq!(h2.bias_score(), 0.0);
    }

    #[test]
    fn bias_agrees_with_recompute() {
        let tables = [
            table_from_tokens(&[A, B, A]).unwrap(),
            table_from_tokens(&[B, B]).unwrap(),
        ];
        let seq = [A, B, A, B, B, A, C, A, B, A];
        let mut h = Hypothesis::root(2);
        for &t in &seq {
            h = apply_bias(&h, t, &tables, 0.25);
        }
        let s = recompute(&tables, &seq);
        let expect = 0.25 * (s.completed_total + s.max_partial()) as f64;
        assert!((h.bias_score() - expect).abs() < 1e-12);
    }

    /// Fixed per-position distributions over {sos, eos, a, b, c}.
    struct Table(Vec<Vec<f64>>);

    impl BaseScorer for Table {
        fn vocab_size(&self) -> usize {
            5
        }
        fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
            let row = &self.0[prefix.len().min(self.0.len() - 1)];
            row.iter().map(|p| p.ln()).collect()
        }
    }

    fn scorer() -> Table {
        // reference "a b" then end; "c" is a confusable alternative at step 1
        Table(vec![
            vec![1e-9, 0.01, 0.8, 0.09, 0.1 - 1e-9],
            vec![1e-9, 0.01, 0.04, 0.35, 0.6 - 1e-9],
            vec![1e-9, 0.9, 0.04, 0.03, 0.03 - 1e-9],
        ])
    }

    #[test]
    fn unbiased_search_takes_confusion() {
        let cfg = BeamConfig {
            beam: 4,
            expansions: 5,
            max_len: 3,
        };
        let out = beam_search(&scorer(), 0.0, &[], &cfg).unwrap();
        assert!(out.complete);
        assert_eq!(out.hyps[0].tokens, [A, C]);
        for w in out.hyps.windows(2) {
            assert!(w[0].total_score() >= w[1].total_score());
        }
    }

    #[test]
    fn bonus_recovers_phrase() {
        let cfg = BeamConfig {
            beam: 4,
            expansions: 5,
            max_len: 3,
        };
        let tables = [table_from_tokens(&[A, B]).unwrap()];
        let out = beam_search(&scorer(), 1.0, &tables, &cfg).unwrap();
        assert_eq!(out.hyps[0].tokens, [A, B]);
        assert_eq!(out.hyps[0].vested_bias, 2.0);
        assert_eq!(out.hyps[0].pending_bias, 0.0);
    }

    #[test]
    fn incomplete_when_max_len_too_short() {
        let cfg = BeamConfig {
            beam: 2,
            expansions: 5,
            max_len: 1,
        };
        let tables = [table_from_tokens(&[A, B]).unwrap()];
        let out = beam_search(&scorer(), 1.0, &tables, &cfg).unwrap();
        assert!(!out.complete);
        assert!(out.hyps.iter().all(|h| h.pending_bias == 0.0));
    }

    #[test]
    fn zero_beam_rejected() {
        let cfg = BeamConfig {
            beam: 0,
            expansions: 5,
            max_len: 3,
        };
        assert!(beam_search(&scorer(), 0.0, &[], &cfg).is_err());
    }
}
