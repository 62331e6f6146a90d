//! Vocabulary, phrases, utterances and ground-truth phrase labels.
//!
//! Tokenization is character level: every character of a word maps to the
//! vocabulary entry with the same string, and consecutive words are joined by
//! the word-separator token [`SEPARATOR`]. Ids 0 and 1 are always `<sos>` and
//! `<eos>`.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const SEPARATOR: &str = "|";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    separator: Option<TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from its entries in id order. Entries 0 and 1 must
    /// be `<sos>` and `<eos>`.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != SOS || tokens[1] != EOS {
            return Err(Error::Config(format!(
                "vocabulary must start with {SOS} and {EOS}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::Config(format!("empty token string at id {id}")));
            }
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
        }
        let separator = index.get(SEPARATOR).copied();
        Ok(Vocab {
            tokens,
            index,
            separator,
        })
    }

    /// Reserved tokens, the separator, then one entry per character.
    pub fn char_level<I: IntoIterator<Item = char>>(chars: I) -> Result<Self> {
        let mut tokens = vec![SOS.to_string(), EOS.to_string(), SEPARATOR.to_string()];
        for c in chars {
            let s = c.to_string();
            if !tokens.contains(&s) {
                tokens.push(s);
            }
        }
        Vocab::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sos_id(&self) -> TokenId {
        0
    }

    pub fn eos_id(&self) -> TokenId {
        1
    }

    pub fn separator_id(&self) -> Option<TokenId> {
        self.separator
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn entries(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id == self.sos_id() || id == self.eos_id()
    }

    /// Ids that may appear in tokenized text (everything except `<sos>`/`<eos>`).
    pub fn ordinary_ids(&self) -> impl Iterator<Item = TokenId> {
        2..self.tokens.len() as TokenId
    }
}

pub fn tokenize<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    for (i, word) in words.iter().enumerate() {
        let word = word.as_ref();
        if i > 0 {
            let sep = vocab.separator_id().ok_or_else(|| Error::UnknownSymbol {
                symbol: SEPARATOR.to_string(),
                word: word.to_string(),
            })?;
            out.push(sep);
        }
        let mut buf = [0u8; 4];
        for c in word.chars() {
            let s: &str = c.encode_utf8(&mut buf);
            match vocab.id(s) {
                Some(id) if !vocab.is_reserved(id) && Some(id) != vocab.separator_id() => {
                    out.push(id)
                }
                _ => {
                    return Err(Error::UnknownSymbol {
                        symbol: s.to_string(),
                        word: word.to_string(),
                    })
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tokenize`]. Empty words produced by repeated or leading
/// separators are dropped.
pub fn detokenize(tokens: &[TokenId], vocab: &Vocab) -> Result<Vec<String>> {
    let mut words = Vec::new();
    let mut current = String::new();
    for &id in tokens {
        if vocab.is_reserved(id) {
            return Err(Error::InvalidToken(id));
        }
        if Some(id) == vocab.separator_id() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            continue;
        }
        current.push_str(vocab.token(id).ok_or(Error::InvalidToken(id))?);
    }
    if !current.is_empty() {
        words.push(current);
    }
    Ok(words)
}

/// A candidate biasing phrase. `tokens` never contains `<sos>` and always ends
/// with `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Phrase {
    words: Vec<String>,
    tokens: Vec<TokenId>,
}

impl Phrase {
    pub fn new<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Result<Self> {
        let words: Vec<String> = words.iter().map(|w| w.as_ref().to_lowercase()).collect();
        if words.is_empty() {
            return Err(Error::InvalidPhrase("phrase has no words".into()));
        }
        let mut tokens = tokenize(&words, vocab)?;
        if tokens.is_empty() {
            return Err(Error::InvalidPhrase("phrase has no tokens".into()));
        }
        tokens.push(vocab.eos_id());
        Ok(Phrase { words, tokens })
    }

    /// The empty phrase: a single `<eos>` prediction.
    pub fn empty(vocab: &Vocab) -> Self {
        Phrase {
            words: Vec::new(),
            tokens: vec![vocab.eos_id()],
        }
    }

    /// Builds a phrase from raw tokens. Used by tests and the scorer oracles
    /// where no word form is needed.
    pub fn from_tokens(words: Vec<String>, tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidPhrase("phrase has no tokens".into()));
        }
        Ok(Phrase { words, tokens })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Token count including the terminal `<eos>`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Tokens used for prefix matching during search: everything but `<eos>`.
    pub fn match_tokens(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Frame-level encoder output, `frames` rows by `dim` columns, row major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderFeatures {
    frames: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EncoderFeatures {
    pub fn new(frames: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Config("features need at least one frame".into()));
        }
        if values.len() != frames * dim {
            return Err(Error::Config(format!(
                "feature shape {frames}x{dim} does not match {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("encoder features"));
        }
        Ok(EncoderFeatures {
            frames,
            dim,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub words: Vec<String>,
    pub tokens: Vec<TokenId>,
    pub features: Arc<EncoderFeatures>,
}

impl Utterance {
    pub fn new(
        id: impl Into<String>,
        words: Vec<String>,
        vocab: &Vocab,
        features: Arc<EncoderFeatures>,
    ) -> Result<Self> {
        let words: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
        let tokens = tokenize(&words, vocab)?;
        Ok(Utterance {
            id: id.into(),
            words,
            tokens,
            features,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhraseLabel(bool);

impl PhraseLabel {
    pub const POSITIVE: PhraseLabel = PhraseLabel(true);
    pub const NEGATIVE: PhraseLabel = PhraseLabel(false);

    pub fn is_positive(self) -> bool {
        self.0
    }

    pub fn value(self) -> f64 {
        if self.0 {
            1.0
        } else {
            0.0
        }
    }
}

impl From<bool> for PhraseLabel {
    fn from(b: bool) -> Self {
        PhraseLabel(b)
    }
}

/// Positive iff the phrase's words occur contiguously in the transcript
/// (case-insensitive). The empty phrase is labeled by [`label_empty`], this
/// function reports it as negative.
pub fn label_phrase(phrase: &Phrase, utt: &Utterance) -> PhraseLabel {
    contains_words(&utt.words, phrase.words()).into()
}

pub(crate) fn contains_words<A: AsRef<str>, B: AsRef<str>>(haystack: &[A], needle: &[B]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| {
        w.iter()
            .zip(needle)
            .all(|(a, b)| a.as_ref().to_lowercase() == b.as_ref().to_lowercase())
    })
}

/// `l0 = 1 - max(l1..lM)`; vacuously positive when no phrases were sampled.
pub fn label_empty(other_labels: &[PhraseLabel]) -> PhraseLabel {
    PhraseLabel(!other_labels.iter().any(|l| l.is_positive()))
}
