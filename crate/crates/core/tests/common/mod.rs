//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ctxbias::fusion::BaseScorer;
use ctxbias::scorer::DecoderParams;
use ctxbias::trainer::{batch_loss, loss_gradients, PhraseBatch};
use ctxbias::{DecoderConfig, EncoderFeatures, Phrase, PhraseLabel, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config(vocab: usize, features: usize) -> DecoderConfig {
    DecoderConfig {
        vocab_size: vocab,
        feature_dim: features,
        model_dim: 8,
        layers: 2,
        heads: 2,
        ff_dim: 16,
        memory_context: 1,
    }
}

/// Seeded init with every block, gains and biases included, perturbed so no
/// parameter sits at a special value.
pub fn random_params(config: DecoderConfig, rng: &mut ChaCha8Rng) -> DecoderParams {
    let mut p = DecoderParams::init(config, rng.random(), 0.5).unwrap();
    for (_, block) in p.blocks_mut() {
        for v in block.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    p
}

pub fn random_features(frames: usize, dim: usize, rng: &mut ChaCha8Rng) -> EncoderFeatures {
    let v = (0..frames * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
    EncoderFeatures::new(frames, dim, v).unwrap()
}

pub fn random_phrase(rng: &mut ChaCha8Rng, vocab: usize, max_body: usize) -> Phrase {
    let n = rng.random_range(1..=max_body);
    let mut toks: Vec<TokenId> = (0..n).map(|_| rng.random_range(2..vocab as TokenId)).collect();
    toks.push(1);
    Phrase::from_tokens(vec![], toks).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, m: usize) -> PhraseBatch {
    let phrases: Vec<Phrase> = (0..m).map(|_| random_phrase(rng, vocab, 3)).collect();
    let labels = (0..=m).map(|_| PhraseLabel::from(rng.random_bool(0.5))).collect();
    PhraseBatch { phrases, labels }
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter. Relative errors use `max(|a|, |n|, floor)` as the
/// denominator so that gradients at rounding-noise level are compared
/// absolutely.
pub fn gradient_check(
    params: &DecoderParams,
    x: &EncoderFeatures,
    batch: &PhraseBatch,
    beta: f64,
    eps: f64,
    floor: f64,
) -> f64 {
    let (_, grads) = loss_gradients(params, x, batch, beta).unwrap();
    let analytic: Vec<f64> = grads
        .blocks()
        .into_iter()
        .flat_map(|(_, b)| b.iter().copied().collect::<Vec<_>>())
        .collect();
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    let mut k = 0;
    let n_blocks = p.blocks().len();
    for bi in 0..n_blocks {
        let len = p.blocks()[bi].1.len();
        for j in 0..len {
            let orig = get(&p, bi, j);
            set(&mut p, bi, j, orig + eps);
            let up = batch_loss(&p, x, batch, beta).unwrap().loss.combined;
            set(&mut p, bi, j, orig - eps);
            let down = batch_loss(&p, x, batch, beta).unwrap().loss.combined;
            set(&mut p, bi, j, orig);
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            k += 1;
        }
    }
    worst
}

fn get(p: &DecoderParams, block: usize, j: usize) -> f64 {
    *p.blocks()[block].1.iter().nth(j).unwrap()
}

fn set(p: &mut DecoderParams, block: usize, j: usize, v: f64) {
    let mut blocks = p.blocks_mut();
    *blocks[block].1.iter_mut().nth(j).unwrap() = v;
}

// ------------------------------------------------------------ forward oracle

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &ndarray::Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for t in 0..k {
            for j in 0..m {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

fn row_add(a: &mut Mat, bias: &Mat) {
    for r in a.iter_mut() {
        for (v, b) in r.iter_mut().zip(&bias[0]) {
            *v += b;
        }
    }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn norm(a: &Mat, g: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[0][i] + b[0][i])
                .collect()
        })
        .collect()
}

fn positional(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = i - i % 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Attention of `q` rows over `k`/`v` rows, split into heads; row `i` may
/// look at key `j` only when `visible(i, j)`.
fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, visible: impl Fn(usize, usize) -> bool) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let logits: Vec<Option<f64>> = (0..k.len())
                .map(|j| {
                    visible(i, j).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let m = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - m).exp())).collect();
            let z: f64 = w.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..k.len()).map(|j| w[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh())
}

/// Next-token log-distributions after each prefix of `inputs` (one phrase,
/// starting with `<sos>`), computed with plain loops.
pub fn oracle_logprobs(p: &DecoderParams, x: &EncoderFeatures, inputs: &[TokenId]) -> Mat {
    let c = p.config;
    let d = c.model_dim;
    // each memory row sees its frame and `memory_context` neighbours a side
    let k = c.memory_context as isize;
    let feats: Mat = (0..x.frames() as isize)
        .map(|t| {
            let mut row = vec![];
            for o in -k..=k {
                let src = t + o;
                if src < 0 || src >= x.frames() as isize {
                    row.extend(std::iter::repeat_n(0.0, x.dim()));
                } else {
                    row.extend_from_slice(x.frame(src as usize));
                }
            }
            row
        })
        .collect();
    let mut mem = matmul(&feats, &to_mat(&p.mem_w));
    row_add(&mut mem, &to_mat(&p.mem_b));
    for (t, row) in mem.iter_mut().enumerate() {
        for (v, e) in row.iter_mut().zip(positional(t, d)) {
            *v += e;
        }
    }
    let mut h: Mat = inputs
        .iter()
        .enumerate()
        .map(|(i, &tok)| {
            p.embed
                .row(tok as usize)
                .iter()
                .zip(positional(i, d))
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    for l in &p.layers {
        let n1 = norm(&h, &to_mat(&l.ln1_g), &to_mat(&l.ln1_b));
        let sa = attend(
            &matmul(&n1, &to_mat(&l.self_q)),
            &matmul(&n1, &to_mat(&l.self_k)),
            &matmul(&n1, &to_mat(&l.self_v)),
            c.heads,
            |i, j| j <= i,
        );
        h = add(&h, &matmul(&sa, &to_mat(&l.self_o)));
        let n2 = norm(&h, &to_mat(&l.ln2_g), &to_mat(&l.ln2_b));
        let ca = attend(
            &matmul(&n2, &to_mat(&l.cross_q)),
            &matmul(&mem, &to_mat(&l.cross_k)),
            &matmul(&mem, &to_mat(&l.cross_v)),
            c.heads,
            |_, _| true,
        );
        h = add(&h, &matmul(&ca, &to_mat(&l.cross_o)));
        let n3 = norm(&h, &to_mat(&l.ln3_g), &to_mat(&l.ln3_b));
        let mut f = matmul(&n3, &to_mat(&l.ff_w1));
        row_add(&mut f, &to_mat(&l.ff_b1));
        let f: Mat = f.iter().map(|r| r.iter().map(|&u| gelu(u)).collect()).collect();
        let mut f = matmul(&f, &to_mat(&l.ff_w2));
        row_add(&mut f, &to_mat(&l.ff_b2));
        h = add(&h, &f);
    }
    let hf = norm(&h, &to_mat(&p.lnf_g), &to_mat(&p.lnf_b));
    let mut logits = matmul(&hf, &to_mat(&p.out_w));
    row_add(&mut logits, &to_mat(&p.out_b));
    logits
        .into_iter()
        .map(|r| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            r.iter().map(|v| v - z.ln()).collect()
        })
        .collect()
}

pub fn oracle_phrase_logprob(p: &DecoderParams, x: &EncoderFeatures, phrase: &Phrase) -> f64 {
    let toks = phrase.tokens();
    let mut inputs = vec![0];
    inputs.extend_from_slice(&toks[..toks.len() - 1]);
    let lp = oracle_logprobs(p, x, &inputs);
    toks.iter().enumerate().map(|(t, &tok)| lp[t][tok as usize]).sum()
}

// ------------------------------------------------------------ matching oracle

/// Number of (possibly overlapping) occurrences of `pattern` in `seq`.
pub fn occurrences(pattern: &[TokenId], seq: &[TokenId]) -> usize {
    if pattern.is_empty() || pattern.len() > seq.len() {
        return 0;
    }
    seq.windows(pattern.len()).filter(|w| *w == pattern).count()
}

/// Longest proper prefix of `pattern` that is a suffix of `seq`.
pub fn longest_partial(pattern: &[TokenId], seq: &[TokenId]) -> usize {
    (0..pattern.len())
        .rev()
        .find(|&k| k <= seq.len() && seq[seq.len() - k..] == pattern[..k])
        .unwrap_or(0)
}

// ------------------------------------------------------------ WER oracle

/// Plain Levenshtein distance over words.
pub fn levenshtein(a: &[String], b: &[String]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

// ------------------------------------------------------------ base scorers

/// Base scorer with an arbitrary but fixed distribution per prefix.
pub struct HashScorer {
    pub vocab: usize,
    pub seed: u64,
    /// Logit spread; larger values make sharper distributions.
    pub spread: f64,
}

impl BaseScorer for HashScorer {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut r = ChaCha8Rng::seed_from_u64(h.finish());
        let logits: Vec<f64> = (0..self.vocab)
            .map(|_| r.random_range(-self.spread..self.spread))
            .collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        logits.iter().map(|v| v - z.ln()).collect()
    }
}

/// Every finished sequence of at most `max_len` steps, scored as
/// base + bonus * completed tokens.
pub fn brute_force(
    base: &dyn BaseScorer,
    phrases: &[Vec<TokenId>],
    bonus: f64,
    max_len: usize,
) -> (Vec<TokenId>, f64) {
    let v = base.vocab_size() as TokenId;
    let mut best: Option<(Vec<TokenId>, f64)> = None;
    let mut stack: Vec<(Vec<TokenId>, f64)> = vec![(vec![], 0.0)];
    while let Some((seq, score)) = stack.pop() {
        let lp = base.next_log_probs(&seq);
        let done = score + lp[1] + bonus * completed_tokens(phrases, &seq) as f64;
        let better = match &best {
            None => true,
            Some((bs, bscore)) => match done.total_cmp(bscore) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => (seq.len(), &seq) < (bs.len(), bs),
            },
        };
        if better {
            best = Some((seq.clone(), done));
        }
        if seq.len() + 1 < max_len {
            for t in 2..v {
                let mut next = seq.clone();
                next.push(t);
                stack.push((next, score + lp[t as usize]));
            }
        }
    }
    best.unwrap()
}

/// Tokens of `seq` covered by completed phrase occurrences, counted per
/// occurrence.
pub fn completed_tokens(phrases: &[Vec<TokenId>], seq: &[TokenId]) -> usize {
    phrases.iter().map(|p| p.len() * occurrences(p, seq)).sum()
}
