//! Per-phrase partial-match tables and the per-hypothesis match state.
//!
//! Each active phrase gets its own prefix-function table. A hypothesis keeps
//! one partial-match length per phrase; advancing by a token follows the
//! classic KMP transition. A length that reaches the full phrase is counted as
//! a completed occurrence and immediately falls back to the longest proper
//! border, so occurrences may overlap.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::{Phrase, TokenId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialMatchTable {
    tokens: Vec<TokenId>,
    backup: Vec<usize>,
}

impl PartialMatchTable {
    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// `backup[k]` is the length of the longest proper prefix of
    /// `tokens[..=k]` that is also its suffix.
    pub fn backup(&self) -> &[usize] {
        &self.backup
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// One KMP transition from partial length `m` (`m < len`). Returns the new
    /// length, which equals `len` on a full match.
    fn advance(&self, mut m: usize, token: TokenId) -> usize {
        while m > 0 && self.tokens[m] != token {
            m = self.backup[m - 1];
        }
        if self.tokens[m] == token {
            m += 1;
        }
        m
    }
}

pub fn build_table(phrase: &Phrase) -> Result<PartialMatchTable> {
    table_from_tokens(phrase.match_tokens())
}

pub fn table_from_tokens(tokens: &[TokenId]) -> Result<PartialMatchTable> {
    if tokens.is_empty() {
        return Err(Error::InvalidPhrase(
            "cannot match a phrase without tokens".into(),
        ));
    }
    let mut backup = vec![0usize; tokens.len()];
    let mut q = 0;
    for i in 1..tokens.len() {
        while q > 0 && tokens[q] != tokens[i] {
            q = backup[q - 1];
        }
        if tokens[q] == tokens[i] {
            q += 1;
        }
        backup[i] = q;
    }
    Ok(PartialMatchTable {
        tokens: tokens.to_vec(),
        backup,
    })
}

/// TSV dump, one row per table: phrase tokens then the backup array.
pub fn dump_tables(tables: &[PartialMatchTable]) -> String {
    let mut out = String::from("phrase_tokens\tbackup\n");
    for t in tables {
        let toks: Vec<String> = t.tokens.iter().map(|x| x.to_string()).collect();
        let back: Vec<String> = t.backup.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{}\t{}", toks.join(","), back.join(","));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchState {
    pub lengths: Vec<usize>,
    /// Tokens covered by all completed occurrences so far.
    pub completed_total: usize,
}

impl MatchState {
    pub fn zero(phrases: usize) -> Self {
        MatchState {
            lengths: vec![0; phrases],
            completed_total: 0,
        }
    }

    pub fn max_partial(&self) -> usize {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub state: MatchState,
    /// Some phrase has a nonzero partial match after the step.
    pub extended: bool,
    /// Indices of the phrases completed by this token.
    pub completions: Vec<usize>,
}

pub fn step(state: &MatchState, tables: &[PartialMatchTable], token: TokenId) -> StepOutcome {
    debug_assert_eq!(state.lengths.len(), tables.len());
    let mut next = MatchState {
        lengths: Vec::with_capacity(tables.len()),
        completed_total: state.completed_total,
    };
    let mut completions = Vec::new();
    for (j, (table, &m)) in tables.iter().zip(&state.lengths).enumerate() {
        let mut m = table.advance(m, token);
        if m == table.len() {
            completions.push(j);
            next.completed_total += m;
            m = table.backup[m - 1];
        }
        next.lengths.push(m);
    }
    let extended = next.max_partial() > 0;
    StepOutcome {
        state: next,
        extended,
        completions,
    }
}

pub fn recompute(tables: &[PartialMatchTable], tokens: &[TokenId]) -> MatchState {
    tokens
        .iter()
        .fold(MatchState::zero(tables.len()), |s, &t| step(&s, tables, t).state)
}
