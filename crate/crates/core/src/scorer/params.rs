use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the biasing decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Frames on each side of a frame that its memory projection sees. Zero
    /// projects each frame on its own.
    #[serde(default)]
    pub memory_context: usize,
}

impl DecoderConfig {
    /// Two pre-norm layers, width 32, two heads, feed-forward width 64.
    pub fn desk(vocab_size: usize, feature_dim: usize) -> Self {
        DecoderConfig {
            vocab_size,
            feature_dim,
            model_dim: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            memory_context: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.feature_dim == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::Config(format!("degenerate decoder config {self:?}")));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Input width of the memory projection.
    pub fn memory_input_dim(&self) -> usize {
        (2 * self.memory_context + 1) * self.feature_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub self_q: Array2<f64>,
    pub self_k: Array2<f64>,
    pub self_v: Array2<f64>,
    pub self_o: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub cross_q: Array2<f64>,
    pub cross_k: Array2<f64>,
    pub cross_v: Array2<f64>,
    pub cross_o: Array2<f64>,
    pub ln3_g: Array2<f64>,
    pub ln3_b: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

/// All trainable weights. Bias and gain vectors are stored as `1 x n`
/// matrices so every block has the same representation. The same type is used
/// as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub embed: Array2<f64>,
    pub mem_w: Array2<f64>,
    pub mem_b: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array2<f64>,
    pub lnf_b: Array2<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            ln1_g, ln1_b, self_q, self_k, self_v, self_o, ln2_g, ln2_b, cross_q, cross_k, cross_v,
            cross_o, ln3_g, ln3_b, ff_w1, ff_b1, ff_w2, ff_b2
        )
    };
}

impl LayerParams {
    fn zeros(c: &DecoderConfig) -> Self {
        let d = c.model_dim;
        let z = |r, k| Array2::zeros((r, k));
        LayerParams {
            ln1_g: z(1, d),
            ln1_b: z(1, d),
            self_q: z(d, d),
            self_k: z(d, d),
            self_v: z(d, d),
            self_o: z(d, d),
            ln2_g: z(1, d),
            ln2_b: z(1, d),
            cross_q: z(d, d),
            cross_k: z(d, d),
            cross_v: z(d, d),
            cross_o: z(d, d),
            ln3_g: z(1, d),
            ln3_b: z(1, d),
            ff_w1: z(d, c.ff_dim),
            ff_b1: z(1, c.ff_dim),
            ff_w2: z(c.ff_dim, d),
            ff_b2: z(1, d),
        }
    }

    fn blocks(&self) -> Vec<(&'static str, &Array2<f64>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &self.$f)),*] };
        }
        layer_fields!(list)
    }

    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        macro_rules! list {
            ($($f:ident),*) => { vec![$((stringify!($f), &mut self.$f)),*] };
        }
        layer_fields!(list)
    }
}

fn is_gain(name: &str) -> bool {
    name.ends_with("_g")
}

impl DecoderParams {
    pub fn zeros(config: DecoderConfig) -> Self {
        let (v, d) = (config.vocab_size, config.model_dim);
        DecoderParams {
            config,
            embed: Array2::zeros((v, d)),
            mem_w: Array2::zeros((config.memory_input_dim(), d)),
            mem_b: Array2::zeros((1, d)),
            layers: (0..config.layers).map(|_| LayerParams::zeros(&config)).collect(),
            lnf_g: Array2::zeros((1, d)),
            lnf_b: Array2::zeros((1, d)),
            out_w: Array2::zeros((d, v)),
            out_b: Array2::zeros((1, v)),
        }
    }

    /// Weights uniform in `[-scale, scale]` from a seeded stream; layer-norm
    /// gains start at one.
    pub fn init(config: DecoderConfig, seed: u64, scale: f64) -> Result<Self> {
        config.validate()?;
        let mut p = DecoderParams::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, block) in p.blocks_mut() {
            if is_gain(&name) {
                block.fill(1.0);
            } else if !name.ends_with("_b") && !name.ends_with("_b1") && !name.ends_with("_b2") {
                block.mapv_inplace(|_| rng.random_range(-scale..=scale));
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        DecoderParams::zeros(self.config)
    }

    pub fn blocks(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("embed".into(), &self.embed),
            ("mem_w".into(), &self.mem_w),
            ("mem_b".into(), &self.mem_b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(
                layer
                    .blocks()
                    .into_iter()
                    .map(|(n, b)| (format!("layer{l}.{n}"), b)),
            );
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("embed".into(), &mut self.embed),
            ("mem_w".into(), &mut self.mem_w),
            ("mem_b".into(), &mut self.mem_b),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.extend(
                layer
                    .blocks_mut()
                    .into_iter()
                    .map(|(n, b)| (format!("layer{l}.{n}"), b)),
            );
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("out_w".into(), &mut self.out_w));
        out.push(("out_b".into(), &mut self.out_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, block by block.
    pub fn add_scaled(&mut self, other: &DecoderParams, alpha: f64) {
        for ((_, a), (_, b)) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, a) in self.blocks_mut() {
            a.mapv_inplace(|v| v * alpha);
        }
    }

    /// Replaces block contents from `(name, shape, values)` triples, checking
    /// that names and shapes line up with this configuration.
    pub fn load_blocks(&mut self, blocks: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let mine = self.blocks_mut();
        if mine.len() != blocks.len() {
            return Err(Error::ConfigMismatch(format!(
                "expected {} parameter blocks, found {}",
                mine.len(),
                blocks.len()
            )));
        }
        for ((name, dst), (src_name, shape, values)) in mine.into_iter().zip(blocks) {
            if &name != src_name || shape.as_slice() != dst.shape() || values.len() != dst.len() {
                return Err(Error::ConfigMismatch(format!(
                    "block {src_name} {shape:?} does not fit {name} {:?}",
                    dst.shape()
                )));
            }
            for (d, &s) in dst.iter_mut().zip(values) {
                *d = s;
            }
        }
        Ok(())
    }
}
