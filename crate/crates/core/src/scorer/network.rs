//! Packed forward and backward passes of the biasing decoder.
//!
//! Phrases are scored as one packed batch: all teacher-forced input positions
//! are stacked into a single `rows x model_dim` matrix, and self-attention is
//! restricted to causal attention within each phrase's row range. The encoder
//! memory and its per-layer key/value projections are shared by all phrases
//! of an utterance.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{DecoderParams, LayerParams};
use crate::error::{Error, Result};
use crate::types::{EncoderFeatures, Phrase, TokenId};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn sinusoid(rows: usize, dim: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((rows, dim));
    for pos in 0..rows {
        for i in (0..dim).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / dim as f64);
            pe[[pos, i]] = angle.sin();
            if i + 1 < dim {
                pe[[pos, i + 1]] = angle.cos();
            }
        }
    }
    pe
}

fn check_finite(a: &Array2<f64>, location: impl FnOnce() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(location()))
    }
}

/// Teacher-forced input rows for a set of phrases.
#[derive(Debug, Clone)]
pub(crate) struct PackedInput {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl PackedInput {
    /// Inputs are `<sos> p1 .. p(L-1)`, targets `p1 .. pL`.
    pub fn from_phrases<'a, I: IntoIterator<Item = &'a Phrase>>(phrases: I, sos: TokenId) -> Self {
        let mut packed = PackedInput {
            inputs: Vec::new(),
            targets: Vec::new(),
            positions: Vec::new(),
            segments: Vec::new(),
        };
        for p in phrases {
            let start = packed.inputs.len();
            packed.inputs.push(sos);
            packed.inputs.extend_from_slice(&p.tokens()[..p.len() - 1]);
            packed.targets.extend_from_slice(p.tokens());
            packed.positions.extend(0..p.len());
            packed.segments.push(start..packed.inputs.len());
        }
        packed
    }

    /// A single prefix scored for its next-token distribution only.
    pub fn from_prefix(prefix: &[TokenId]) -> Self {
        PackedInput {
            inputs: prefix.to_vec(),
            targets: vec![0; prefix.len()],
            positions: (0..prefix.len()).collect(),
            segments: vec![0..prefix.len()],
        }
    }

    pub fn rows(&self) -> usize {
        self.inputs.len()
    }

    fn max_position(&self) -> usize {
        self.positions.iter().copied().max().unwrap_or(0)
    }
}

/// Encoder memory after projection, plus per-layer cross-attention keys and
/// values.
pub(crate) struct Memory {
    pub mem: Array2<f64>,
    pub keys: Vec<Array2<f64>>,
    pub values: Vec<Array2<f64>>,
}

pub(crate) fn encode_memory(params: &DecoderParams, x: &EncoderFeatures) -> Result<Memory> {
    let c = &params.config;
    if x.dim() != c.feature_dim {
        return Err(Error::ConfigMismatch(format!(
            "features have dim {}, decoder expects {}",
            x.dim(),
            c.feature_dim
        )));
    }
    let mut mem = unfold(x, c.memory_context).dot(&params.mem_w);
    mem += &params.mem_b;
    mem += &sinusoid(x.frames(), c.model_dim);
    check_finite(&mem, || "memory projection".into())?;
    let keys = params.layers.iter().map(|l| mem.dot(&l.cross_k)).collect();
    let values = params.layers.iter().map(|l| mem.dot(&l.cross_v)).collect();
    Ok(Memory { mem, keys, values })
}

/// Row `t` is frames `t-k ..= t+k` side by side, zero outside the utterance.
pub(crate) fn unfold(x: &EncoderFeatures, k: usize) -> Array2<f64> {
    let (t, f) = (x.frames(), x.dim());
    let xv = ArrayView2::from_shape((t, f), x.values()).expect("feature shape");
    if k == 0 {
        return xv.to_owned();
    }
    let mut out = Array2::zeros((t, (2 * k + 1) * f));
    for row in 0..t {
        for o in 0..=2 * k {
            let src = row + o;
            if src >= k && src - k < t {
                out.slice_mut(s![row, o * f..(o + 1) * f])
                    .assign(&xv.row(src - k));
            }
        }
    }
    out
}

struct NormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    let y = &xhat * g + b;
    (y, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (r, ((dxh, xh), mut out)) in dxhat
        .rows()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(dx.rows_mut())
        .enumerate()
    {
        let mean_d = dxh.sum() / d;
        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        let inv = cache.inv_std[r];
        for ((o, &a), &h) in out.iter_mut().zip(dxh).zip(xh) {
            *o = inv * (a - mean_d - h * mean_dx);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_rows_inplace(a: &mut Array2<f64>) {
    for mut row in a.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - m).exp();
            z += e;
            e
        });
        row.mapv_inplace(|v| v / z);
    }
}

/// `dS = P * (dP - rowsum(dP * P))`
fn softmax_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let total = row.sum();
        for (v, &pv) in row.iter_mut().zip(prow) {
            *v -= pv * total;
        }
    }
    ds
}

struct LayerCache {
    n1: NormCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Self-attention probabilities indexed `[segment][head]`.
    self_probs: Vec<Vec<Array2<f64>>>,
    self_out: Array2<f64>,
    n2: NormCache,
    h2: Array2<f64>,
    q2: Array2<f64>,
    /// Cross-attention probabilities per head, `rows x frames`.
    cross_probs: Vec<Array2<f64>>,
    cross_out: Array2<f64>,
    n3: NormCache,
    h3: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    nf: NormCache,
    hf: Array2<f64>,
    /// Log-probabilities, `rows x vocab`.
    pub logp: Array2<f64>,
}

impl ForwardCache {
    pub fn segment_logp(&self, input: &PackedInput) -> Vec<f64> {
        input
            .segments
            .iter()
            .map(|seg| {
                seg.clone()
                    .map(|r| self.logp[[r, input.targets[r] as usize]])
                    .sum()
            })
            .collect()
    }
}

fn head_cols(h: usize, dh: usize) -> Range<usize> {
    h * dh..(h + 1) * dh
}

fn layer_forward(
    lp: &LayerParams,
    x: Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    input: &PackedInput,
    heads: usize,
) -> (Array2<f64>, LayerCache) {
    let dh = x.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (h1, n1) = layer_norm(&x, &lp.ln1_g, &lp.ln1_b);
    let q = h1.dot(&lp.self_q);
    let k = h1.dot(&lp.self_k);
    let v = h1.dot(&lp.self_v);
    let mut self_out = Array2::zeros(x.raw_dim());
    let mut self_probs = Vec::with_capacity(input.segments.len());
    for seg in &input.segments {
        let n = seg.len();
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = head_cols(h, dh);
            let qs = q.slice(s![seg.clone(), cols.clone()]);
            let ks = k.slice(s![seg.clone(), cols.clone()]);
            let vs = v.slice(s![seg.clone(), cols.clone()]);
            let mut p = qs.dot(&ks.t()) * scale;
            for i in 0..n {
                for j in i + 1..n {
                    p[[i, j]] = f64::NEG_INFINITY;
                }
            }
            softmax_rows_inplace(&mut p);
            self_out
                .slice_mut(s![seg.clone(), cols])
                .assign(&p.dot(&vs));
            per_head.push(p);
        }
        self_probs.push(per_head);
    }
    let x1 = &x + &self_out.dot(&lp.self_o);

    let (h2, n2) = layer_norm(&x1, &lp.ln2_g, &lp.ln2_b);
    let q2 = h2.dot(&lp.cross_q);
    let mut cross_out = Array2::zeros(x.raw_dim());
    let mut cross_probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = head_cols(h, dh);
        let mut p = q2.slice(s![.., cols.clone()]).dot(&keys.slice(s![.., cols.clone()]).t()) * scale;
        softmax_rows_inplace(&mut p);
        cross_out
            .slice_mut(s![.., cols.clone()])
            .assign(&p.dot(&values.slice(s![.., cols])));
        cross_probs.push(p);
    }
    let x2 = &x1 + &cross_out.dot(&lp.cross_o);

    let (h3, n3) = layer_norm(&x2, &lp.ln3_g, &lp.ln3_b);
    let mut pre_act = h3.dot(&lp.ff_w1);
    pre_act += &lp.ff_b1;
    let act = pre_act.mapv(gelu);
    let mut ff = act.dot(&lp.ff_w2);
    ff += &lp.ff_b2;
    let x3 = &x2 + &ff;

    let cache = LayerCache {
        n1,
        h1,
        q,
        k,
        v,
        self_probs,
        self_out,
        n2,
        h2,
        q2,
        cross_probs,
        cross_out,
        n3,
        h3,
        pre_act,
        act,
    };
    (x3, cache)
}

pub(crate) fn forward(
    params: &DecoderParams,
    memory: &Memory,
    input: &PackedInput,
) -> Result<ForwardCache> {
    let c = &params.config;
    let rows = input.rows();
    let pe = sinusoid(input.max_position() + 1, c.model_dim);
    let mut x = Array2::zeros((rows, c.model_dim));
    for (r, (&tok, &pos)) in input.inputs.iter().zip(&input.positions).enumerate() {
        let tok = tok as usize;
        if tok >= c.vocab_size {
            return Err(Error::InvalidToken(tok as TokenId));
        }
        let mut row = x.row_mut(r);
        row.assign(&params.embed.row(tok));
        row += &pe.row(pos);
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, lp) in params.layers.iter().enumerate() {
        let (out, cache) = layer_forward(lp, x, &memory.keys[l], &memory.values[l], input, c.heads);
        check_finite(&out, || format!("decoder layer {l}"))?;
        layers.push(cache);
        x = out;
    }
    let (hf, nf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let mut logp = hf.dot(&params.out_w);
    logp += &params.out_b;
    for mut row in logp.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    check_finite(&logp, || "output projection".into())?;
    Ok(ForwardCache {
        layers,
        nf,
        hf,
        logp,
    })
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    lp: &LayerParams,
    g: &mut LayerParams,
    cache: &LayerCache,
    mut dx: Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    dkeys: &mut Array2<f64>,
    dvalues: &mut Array2<f64>,
    input: &PackedInput,
    heads: usize,
) -> Array2<f64> {
    let dh = dx.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward
    g.ff_b2 += &dx.sum_axis(Axis(0)).insert_axis(Axis(0));
    g.ff_w2 += &cache.act.t().dot(&dx);
    let mut dpre = dx.dot(&lp.ff_w2.t());
    dpre.zip_mut_with(&cache.pre_act, |d, &u| *d *= gelu_grad(u));
    g.ff_b1 += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
    g.ff_w1 += &cache.h3.t().dot(&dpre);
    let dh3 = dpre.dot(&lp.ff_w1.t());
    dx += &layer_norm_backward(&dh3, &cache.n3, &lp.ln3_g, &mut g.ln3_g, &mut g.ln3_b);

    // cross-attention
    g.cross_o += &cache.cross_out.t().dot(&dx);
    let dcross = dx.dot(&lp.cross_o.t());
    let mut dq2 = Array2::zeros(dcross.raw_dim());
    for h in 0..heads {
        let cols = head_cols(h, dh);
        let p = &cache.cross_probs[h];
        let dout = dcross.slice(s![.., cols.clone()]);
        let dp = dout.dot(&values.slice(s![.., cols.clone()]).t());
        let mut dv = dvalues.slice_mut(s![.., cols.clone()]);
        dv += &p.t().dot(&dout);
        let ds = softmax_backward(p, &dp) * scale;
        dq2.slice_mut(s![.., cols.clone()])
            .assign(&ds.dot(&keys.slice(s![.., cols.clone()])));
        let mut dk = dkeys.slice_mut(s![.., cols.clone()]);
        dk += &ds.t().dot(&cache.q2.slice(s![.., cols]));
    }
    g.cross_q += &cache.h2.t().dot(&dq2);
    let dh2 = dq2.dot(&lp.cross_q.t());
    dx += &layer_norm_backward(&dh2, &cache.n2, &lp.ln2_g, &mut g.ln2_g, &mut g.ln2_b);

    // self-attention
    g.self_o += &cache.self_out.t().dot(&dx);
    let dself = dx.dot(&lp.self_o.t());
    let mut dq = Array2::zeros(dself.raw_dim());
    let mut dk = Array2::zeros(dself.raw_dim());
    let mut dv = Array2::zeros(dself.raw_dim());
    for (seg, per_head) in input.segments.iter().zip(&cache.self_probs) {
        for (h, p) in per_head.iter().enumerate() {
            let cols = head_cols(h, dh);
            let dout = dself.slice(s![seg.clone(), cols.clone()]);
            let qs = cache.q.slice(s![seg.clone(), cols.clone()]);
            let ks = cache.k.slice(s![seg.clone(), cols.clone()]);
            let vs = cache.v.slice(s![seg.clone(), cols.clone()]);
            let dp = dout.dot(&vs.t());
            dv.slice_mut(s![seg.clone(), cols.clone()])
                .assign(&p.t().dot(&dout));
            let ds = softmax_backward(p, &dp) * scale;
            dq.slice_mut(s![seg.clone(), cols.clone()])
                .assign(&ds.dot(&ks));
            dk.slice_mut(s![seg.clone(), cols]).assign(&ds.t().dot(&qs));
        }
    }
    g.self_q += &cache.h1.t().dot(&dq);
    g.self_k += &cache.h1.t().dot(&dk);
    g.self_v += &cache.h1.t().dot(&dv);
    let dh1 = dq.dot(&lp.self_q.t()) + dk.dot(&lp.self_k.t()) + dv.dot(&lp.self_v.t());
    dx += &layer_norm_backward(&dh1, &cache.n1, &lp.ln1_g, &mut g.ln1_g, &mut g.ln1_b);
    dx
}

/// Accumulates into `grads` the gradient of `sum_r weights[r] * logp[r, target[r]]`.
pub(crate) fn backward(
    params: &DecoderParams,
    x: &EncoderFeatures,
    memory: &Memory,
    input: &PackedInput,
    cache: &ForwardCache,
    weights: &[f64],
    grads: &mut DecoderParams,
) {
    let c = &params.config;
    debug_assert_eq!(weights.len(), input.rows());

    // d logp / d logits = onehot - softmax, scaled by the row weight
    let mut dlogits = cache.logp.mapv(f64::exp);
    for (r, (&w, &t)) in weights.iter().zip(&input.targets).enumerate() {
        let mut row = dlogits.row_mut(r);
        row.mapv_inplace(|p| -w * p);
        row[t as usize] += w;
    }
    grads.out_b += &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0));
    grads.out_w += &cache.hf.t().dot(&dlogits);
    let dhf = dlogits.dot(&params.out_w.t());
    let mut dx = layer_norm_backward(
        &dhf,
        &cache.nf,
        &params.lnf_g,
        &mut grads.lnf_g,
        &mut grads.lnf_b,
    );

    let frames = memory.mem.nrows();
    let mut dmem = Array2::zeros((frames, c.model_dim));
    for l in (0..params.layers.len()).rev() {
        let mut dkeys = Array2::zeros((frames, c.model_dim));
        let mut dvalues = Array2::zeros((frames, c.model_dim));
        dx = layer_backward(
            &params.layers[l],
            &mut grads.layers[l],
            &cache.layers[l],
            dx,
            &memory.keys[l],
            &memory.values[l],
            &mut dkeys,
            &mut dvalues,
            input,
            c.heads,
        );
        let lp = &params.layers[l];
        grads.layers[l].cross_k += &memory.mem.t().dot(&dkeys);
        grads.layers[l].cross_v += &memory.mem.t().dot(&dvalues);
        dmem += &dkeys.dot(&lp.cross_k.t());
        dmem += &dvalues.dot(&lp.cross_v.t());
    }

    for (r, &tok) in input.inputs.iter().enumerate() {
        let mut row = grads.embed.row_mut(tok as usize);
        row += &dx.row(r);
    }
    grads.mem_b += &dmem.sum_axis(Axis(0)).insert_axis(Axis(0));
    grads.mem_w += &unfold(x, params.config.memory_context).t().dot(&dmem);
}
