//! Synthetic corpora and a toy base scorer for desk-scale experiments.
//!
//! Words are random strings over a small alphabet, split into a frequent pool
//! that carries most of the word mass and a large rare pool. Encoder features
//! are a fixed random code per token, repeated for a few frames, plus Gaussian
//! noise. The toy base scorer is position synchronous with the reference and
//! mishears a share of the rare words as near-miss spellings, which gives
//! biasing something to fix.

use std::collections::{BTreeSet, HashSet};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::BaseScorer;
use crate::types::{EncoderFeatures, Phrase, TokenId, Utterance, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub alphabet_size: usize,
    pub frequent_pool: usize,
    pub rare_pool: usize,
    /// Probability that a generated word comes from the frequent pool.
    pub frequent_mass: f64,
    pub frequent_min_len: usize,
    pub frequent_max_len: usize,
    pub rare_min_len: usize,
    pub rare_max_len: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub feature_dim: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    /// Share of rare-word occurrences the base scorer mishears.
    pub confusion_rate: f64,
    /// Frequent words are misheard at `confusion_rate * frequent_confusion_scale`.
    pub frequent_confusion_scale: f64,
    pub clean_ref_mass: f64,
    pub misheard_ref_mass: f64,
    pub misheard_partner_mass: f64,
    pub end_mass: f64,
    pub train_utterances: usize,
    pub test_utterances: usize,
    pub distractor_counts: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            alphabet_size: 26,
            frequent_pool: 200,
            rare_pool: 4000,
            frequent_mass: 0.9,
            frequent_min_len: 2,
            frequent_max_len: 5,
            rare_min_len: 5,
            rare_max_len: 8,
            min_words: 3,
            max_words: 8,
            feature_dim: 16,
            frames_per_token: 2,
            noise_sigma: 0.5,
            confusion_rate: 0.4,
            frequent_confusion_scale: 0.05,
            clean_ref_mass: 0.95,
            misheard_ref_mass: 0.3,
            misheard_partner_mass: 0.6,
            end_mass: 0.95,
            train_utterances: 2000,
            test_utterances: 200,
            distractor_counts: vec![100, 500, 1000, 2000],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.alphabet_size == 0 || self.alphabet_size > 26 {
            return bad("alphabet_size must be in 1..=26");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(0.0..1.0).contains(&self.confusion_rate) {
            return bad("confusion_rate must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.frequent_mass) {
            return bad("frequent_mass must be in [0, 1]");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad("need 1 <= min_words <= max_words");
        }
        if self.frequent_min_len == 0
            || self.frequent_min_len > self.frequent_max_len
            || self.rare_min_len == 0
            || self.rare_min_len > self.rare_max_len
        {
            return bad("word length ranges are empty");
        }
        if self.feature_dim == 0 || self.frames_per_token == 0 {
            return bad("feature_dim and frames_per_token must be positive");
        }
        let masses = [
            self.clean_ref_mass,
            self.misheard_ref_mass,
            self.misheard_partner_mass,
            self.end_mass,
        ];
        if masses.iter().any(|m| !(0.0..1.0).contains(m))
            || self.misheard_ref_mass + self.misheard_partner_mass >= 1.0
        {
            return bad("scorer masses must leave room for the remainder");
        }
        if self.frequent_pool == 0 || self.rare_pool == 0 {
            return bad("word pools must be nonempty");
        }
        Ok(())
    }
}

/// Deterministic per-string hash used to derive per-utterance streams.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label))
}

/// Vocabulary, word pools and token codes derived from a config.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub vocab: Vocab,
    pub frequent: Vec<String>,
    pub rare: Vec<String>,
    rare_set: HashSet<String>,
    letters: Vec<char>,
    /// `vocab.len() x feature_dim`, row major.
    codes: Vec<f64>,
}

impl SynthWorld {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let letters: Vec<char> = ('a'..='z').take(config.alphabet_size).collect();
        let vocab = Vocab::char_level(letters.iter().copied())?;
        let mut rng = stream(config.seed, "pools");
        let mut seen = HashSet::new();
        let mut draw = |n: usize, lo: usize, hi: usize, rng: &mut ChaCha8Rng| -> Result<Vec<String>> {
            let mut out = Vec::with_capacity(n);
            let mut attempts = 0usize;
            while out.len() < n {
                attempts += 1;
                if attempts > n * 1000 + 10_000 {
                    return Err(Error::Config(
                        "alphabet too small for the requested word pools".into(),
                    ));
                }
                let len = rng.random_range(lo..=hi);
                let w: String = (0..len).map(|_| *letters.choose(rng).unwrap()).collect();
                if seen.insert(w.clone()) {
                    out.push(w);
                }
            }
            Ok(out)
        };
        let frequent = draw(
            config.frequent_pool,
            config.frequent_min_len,
            config.frequent_max_len,
            &mut rng,
        )?;
        let rare = draw(
            config.rare_pool,
            config.rare_min_len,
            config.rare_max_len,
            &mut rng,
        )?;
        let mut code_rng = stream(config.seed, "codes");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let codes = (0..vocab.len() * config.feature_dim)
            .map(|_| normal.sample(&mut code_rng))
            .collect();
        Ok(SynthWorld {
            rare_set: rare.iter().cloned().collect(),
            config: config.clone(),
            vocab,
            frequent,
            rare,
            letters,
            codes,
        })
    }

    pub fn is_rare(&self, word: &str) -> bool {
        self.rare_set.contains(word)
    }

    pub fn code(&self, token: TokenId) -> &[f64] {
        let d = self.config.feature_dim;
        &self.codes[token as usize * d..(token as usize + 1) * d]
    }

    fn sample_words(&self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let c = &self.config;
        let n = rng.random_range(c.min_words..=c.max_words);
        (0..n)
            .map(|_| {
                let pool = if rng.random_bool(c.frequent_mass) {
                    &self.frequent
                } else {
                    &self.rare
                };
                pool.choose(rng).unwrap().clone()
            })
            .collect()
    }

    /// Per-token code repeated `frames_per_token` times plus N(0, sigma^2).
    pub fn features(&self, tokens: &[TokenId], rng: &mut ChaCha8Rng) -> Result<EncoderFeatures> {
        let c = &self.config;
        let d = c.feature_dim;
        let frames = tokens.len() * c.frames_per_token;
        let mut values = Vec::with_capacity(frames * d);
        let noise = Normal::new(0.0, c.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for &t in tokens {
            for _ in 0..c.frames_per_token {
                for &v in self.code(t) {
                    let n = if c.noise_sigma > 0.0 {
                        noise.sample(rng)
                    } else {
                        0.0
                    };
                    values.push(v + n);
                }
            }
        }
        EncoderFeatures::new(frames, d, values)
    }

    fn utterance(&self, id: String, rng: &mut ChaCha8Rng) -> Result<Utterance> {
        let words = self.sample_words(rng);
        let tokens = crate::types::tokenize(&words, &self.vocab)?;
        let features = self.features(&tokens, rng)?;
        Ok(Utterance {
            id,
            words,
            tokens,
            features: Arc::new(features),
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub vocab: Vocab,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub rare_words: Vec<String>,
    /// Distinct rare words of each test utterance, in order of appearance.
    pub ground_truth: Vec<Vec<String>>,
    /// Per test utterance, the largest distractor list; smaller lists are its
    /// prefixes.
    pub distractors: Vec<Vec<String>>,
}

impl SynthCorpus {
    /// Ground-truth words plus the first `n` distractors, shuffled
    /// deterministically.
    pub fn biasing_words(&self, index: usize, n: usize, seed: u64) -> Vec<String> {
        let mut words: Vec<String> = self.ground_truth[index].clone();
        words.extend(self.distractors[index].iter().take(n).cloned());
        let mut rng = stream(seed, &format!("list-{index}-{n}"));
        words.shuffle(&mut rng);
        words
    }

    pub fn biasing_phrases(&self, index: usize, n: usize, seed: u64) -> Result<Vec<Phrase>> {
        self.biasing_words(index, n, seed)
            .iter()
            .map(|w| Phrase::new(&[w.as_str()], &self.vocab))
            .collect()
    }
}

pub fn gen_corpus(config: &SynthConfig) -> Result<SynthCorpus> {
    let world = SynthWorld::new(config)?;
    gen_corpus_in(&world)
}

pub fn gen_corpus_in(world: &SynthWorld) -> Result<SynthCorpus> {
    let c = &world.config;
    let mut rng = stream(c.seed, "utterances");
    let train = (0..c.train_utterances)
        .map(|i| world.utterance(format!("train-{i:05}"), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..c.test_utterances)
        .map(|i| world.utterance(format!("test-{i:04}"), &mut rng))
        .collect::<Result<Vec<_>>>()?;

    let max_n = c.distractor_counts.iter().copied().max().unwrap_or(0);
    let mut ground_truth = Vec::with_capacity(test.len());
    let mut distractors = Vec::with_capacity(test.len());
    for utt in &test {
        let mut own = Vec::new();
        let mut own_set = BTreeSet::new();
        for w in &utt.words {
            if world.is_rare(w) && own_set.insert(w.clone()) {
                own.push(w.clone());
            }
        }
        let mut drng = stream(c.seed, &format!("distractors-{}", utt.id));
        let candidates: Vec<&String> = world.rare.iter().filter(|w| !own_set.contains(*w)).collect();
        let picked: Vec<String> = candidates
            .choose_multiple(&mut drng, max_n.min(candidates.len()))
            .map(|w| (*w).clone())
            .collect();
        ground_truth.push(own);
        distractors.push(picked);
    }
    Ok(SynthCorpus {
        vocab: world.vocab.clone(),
        train,
        test,
        rare_words: world.rare.clone(),
        ground_truth,
        distractors,
    })
}

/// Position-synchronous stand-in for an ASR decoder.
#[derive(Debug, Clone)]
pub struct ToyBaseScorer {
    rows: Vec<Vec<f64>>,
    vocab_size: usize,
    /// Near-miss spellings the scorer prefers, `(word index, partner)`.
    pub confusions: Vec<(usize, String)>,
}

impl ToyBaseScorer {
    pub fn new(world: &SynthWorld, utt: &Utterance) -> Result<Self> {
        let c = &world.config;
        let vocab = &world.vocab;
        let v = vocab.len();
        let mut rng = stream(c.seed, &format!("confusion-{}", utt.id));
        let mut confusions = Vec::new();
        // partner token per reference position, where it differs
        let mut partner: Vec<Option<TokenId>> = vec![None; utt.tokens.len()];
        let mut pos = 0usize;
        for (wi, word) in utt.words.iter().enumerate() {
            let rate = if world.is_rare(word) {
                c.confusion_rate
            } else {
                c.confusion_rate * c.frequent_confusion_scale
            };
            let len = word.chars().count();
            if rate > 0.0 && rng.random_bool(rate.min(1.0)) {
                let k = if world.is_rare(word) {
                    rng.random_range(1..=2usize).min(len)
                } else {
                    1
                };
                let mut chars: Vec<char> = word.chars().collect();
                let mut idx: Vec<usize> = (0..len).collect();
                idx.shuffle(&mut rng);
                for &i in idx.iter().take(k) {
                    if world.letters.len() < 2 {
                        break;
                    }
                    let orig = chars[i];
                    let mut repl = orig;
                    while repl == orig {
                        repl = *world.letters.choose(&mut rng).unwrap();
                    }
                    chars[i] = repl;
                }
                let alt: String = chars.iter().collect();
                for (j, ch) in alt.chars().enumerate() {
                    let tok = vocab.id(ch.encode_utf8(&mut [0u8; 4])).expect("letter in vocab");
                    if tok != utt.tokens[pos + j] {
                        partner[pos + j] = Some(tok);
                    }
                }
                if alt != *word {
                    confusions.push((wi, alt));
                }
            }
            pos += len + 1;
        }

        let spread = |row: &mut Vec<f64>, fixed: &[(TokenId, f64)]| {
            let used: f64 = fixed.iter().map(|(_, m)| m).sum();
            let others = v - fixed.len();
            let rest = (1.0 - used) / others as f64;
            row.iter_mut().for_each(|x| *x = rest);
            for &(t, m) in fixed {
                row[t as usize] = m;
            }
            row.iter_mut().for_each(|x| *x = x.ln());
        };
        let mut rows = Vec::with_capacity(utt.tokens.len() + 1);
        for (t, &r) in utt.tokens.iter().enumerate() {
            let mut row = vec![0.0; v];
            match partner[t] {
                Some(p) => spread(
                    &mut row,
                    &[(p, c.misheard_partner_mass), (r, c.misheard_ref_mass)],
                ),
                None => spread(&mut row, &[(r, c.clean_ref_mass)]),
            }
            rows.push(row);
        }
        let mut end = vec![0.0; v];
        spread(&mut end, &[(vocab.eos_id(), c.end_mass)]);
        rows.push(end);
        Ok(ToyBaseScorer {
            rows,
            vocab_size: v,
            confusions,
        })
    }
}

impl BaseScorer for ToyBaseScorer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.rows[prefix.len().min(self.rows.len() - 1)].clone()
    }

    fn max_len_hint(&self) -> Option<usize> {
        Some(self.rows.len() + 2)
    }
}

pub fn toy_base_scorer(config: &SynthConfig, utt: &Utterance) -> Result<ToyBaseScorer> {
    let world = SynthWorld::new(config)?;
    ToyBaseScorer::new(&world, utt)
}
