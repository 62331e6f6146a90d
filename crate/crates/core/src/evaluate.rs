//! Word error rates overall, on biasing-list words (B-WER) and on all other
//! words (U-WER).
//!
//! Substitutions and deletions are attributed by whether the reference word
//! is in the biasing word set, insertions by the hypothesis word. Corpus
//! rates are computed from summed counts.

use std::collections::BTreeSet;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Match,
    Substitution,
    Deletion,
    Insertion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub ref_word: Option<String>,
    pub hyp_word: Option<String>,
}

impl AlignmentOp {
    pub fn is_error(&self) -> bool {
        self.kind != OpKind::Match
    }
}

/// Unit-cost Levenshtein alignment. Among equal-cost paths the backtrace
/// prefers match, then substitution, then deletion, then insertion.
pub fn align<R: AsRef<str>, H: AsRef<str>>(reference: &[R], hypothesis: &[H]) -> Vec<AlignmentOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let eq = |i: usize, j: usize| reference[i].as_ref() == hypothesis[j].as_ref();
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dist[i - 1][j - 1] + usize::from(!eq(i - 1, j - 1));
            dist[i][j] = diag.min(dist[i - 1][j] + 1).min(dist[i][j - 1] + 1);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dist[i][j];
        if i > 0 && j > 0 && eq(i - 1, j - 1) && here == dist[i - 1][j - 1] {
            ops.push(op(OpKind::Match, Some(&reference[i - 1]), Some(&hypothesis[j - 1])));
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && here == dist[i - 1][j - 1] + 1 {
            ops.push(op(
                OpKind::Substitution,
                Some(&reference[i - 1]),
                Some(&hypothesis[j - 1]),
            ));
            i -= 1;
            j -= 1;
        } else if i > 0 && here == dist[i - 1][j] + 1 {
            ops.push(op(OpKind::Deletion, Some(&reference[i - 1]), None::<&H>));
            i -= 1;
        } else {
            ops.push(op(OpKind::Insertion, None::<&R>, Some(&hypothesis[j - 1])));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

fn op<R: AsRef<str>, H: AsRef<str>>(kind: OpKind, r: Option<&R>, h: Option<&H>) -> AlignmentOp {
    AlignmentOp {
        kind,
        ref_word: r.map(|w| w.as_ref().to_string()),
        hyp_word: h.map(|w| w.as_ref().to_string()),
    }
}

pub fn edit_distance(ops: &[AlignmentOp]) -> usize {
    ops.iter().filter(|o| o.is_error()).count()
}

/// Raw counts for one word category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub ref_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl CategoryCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `None` when the category has no reference words.
    pub fn rate(&self) -> Option<f64> {
        (self.ref_words > 0).then(|| self.errors() as f64 / self.ref_words as f64)
    }
}

impl AddAssign for CategoryCounts {
    fn add_assign(&mut self, o: Self) {
        self.ref_words += o.ref_words;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub biased: CategoryCounts,
    pub unbiased: CategoryCounts,
}

impl ErrorCounts {
    pub fn total(&self) -> CategoryCounts {
        let mut t = self.biased;
        t += self.unbiased;
        t
    }
}

impl AddAssign for ErrorCounts {
    fn add_assign(&mut self, o: Self) {
        self.biased += o.biased;
        self.unbiased += o.unbiased;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub wer: Option<f64>,
    pub u_wer: Option<f64>,
    pub b_wer: Option<f64>,
    pub counts: ErrorCounts,
}

impl ErrorReport {
    pub fn from_counts(counts: ErrorCounts) -> Self {
        ErrorReport {
            wer: counts.total().rate(),
            u_wer: counts.unbiased.rate(),
            b_wer: counts.biased.rate(),
            counts,
        }
    }
}

pub fn count(alignment: &[AlignmentOp], bias_words: &BTreeSet<String>) -> ErrorCounts {
    let mut c = ErrorCounts::default();
    let in_list = |w: &Option<String>| w.as_ref().is_some_and(|w| bias_words.contains(w));
    for o in alignment {
        let cat = match o.kind {
            OpKind::Insertion => {
                if in_list(&o.hyp_word) {
                    &mut c.biased
                } else {
                    &mut c.unbiased
                }
            }
            _ => {
                if in_list(&o.ref_word) {
                    &mut c.biased
                } else {
                    &mut c.unbiased
                }
            }
        };
        match o.kind {
            OpKind::Match => cat.ref_words += 1,
            OpKind::Substitution => {
                cat.ref_words += 1;
                cat.substitutions += 1;
            }
            OpKind::Deletion => {
                cat.ref_words += 1;
                cat.deletions += 1;
            }
            OpKind::Insertion => cat.insertions += 1,
        }
    }
    c
}

pub fn report(alignment: &[AlignmentOp], bias_words: &BTreeSet<String>) -> ErrorReport {
    ErrorReport::from_counts(count(alignment, bias_words))
}

/// Union of the words of every phrase in a biasing list.
pub fn bias_word_set<I, P, S>(phrases: I) -> BTreeSet<String>
where
    I: IntoIterator<Item = P>,
    P: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    phrases
        .into_iter()
        .flat_map(|p| p.into_iter().map(|w| w.as_ref().to_lowercase()).collect::<Vec<_>>())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceReport {
    pub id: String,
    pub report: ErrorReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    #[serde(flatten)]
    pub overall: ErrorReport,
    pub utterances: Vec<UtteranceReport>,
}

/// Per-utterance reports and the corpus report built from summed counts.
pub fn corpus_report<'a, I>(items: I) -> CorpusReport
where
    I: IntoIterator<Item = (&'a str, &'a [String], &'a [String], &'a BTreeSet<String>)>,
{
    let mut total = ErrorCounts::default();
    let mut utterances = Vec::new();
    for (id, reference, hypothesis, bias) in items {
        let c = count(&align(reference, hypothesis), bias);
        total += c;
        utterances.push(UtteranceReport {
            id: id.to_string(),
            report: ErrorReport::from_counts(c),
        });
    }
    CorpusReport {
        overall: ErrorReport::from_counts(total),
        utterances,
    }
}
