use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{pack_segments, Graph, ParamSet, Segment, Tensor, Var};

/// Shape of a transformer news encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    /// Rows of the positional table; longer inputs are truncated.
    pub max_len: usize,
    pub query_dim: usize,
    pub repr_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 30_000,
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            n_layers: 12,
            max_len: 512,
            query_dim: 200,
            repr_dim: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.d_ff == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.query_dim == 0 || self.repr_dim == 0 {
            return Err(Error::Config("query_dim and repr_dim must be positive".into()));
        }
        Ok(())
    }

    /// Learnable scalars in one transformer block.
    pub fn block_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * (d * d + d) + 4 * d + d * f + f + f * d + d
    }

    /// Learnable scalars in the transformer blocks only.
    pub fn layer_params(&self) -> usize {
        self.n_layers * self.block_params()
    }

    /// Token and positional embedding tables.
    pub fn embedding_params(&self) -> usize {
        (self.vocab_size + self.max_len) * self.d_model
    }

    /// Final layer norm, attention pooling and output projection.
    pub fn head_params(&self) -> usize {
        let (d, q, r) = (self.d_model, self.query_dim, self.repr_dim);
        2 * d + d * q + 2 * q + d * r + r
    }

    pub fn total_params(&self) -> usize {
        self.embedding_params() + self.layer_params() + self.head_params()
    }
}

const TOK: usize = 0;
const POS: usize = 1;
const LAYER_BASE: usize = 2;
const PER_LAYER: usize = 16;

// Offsets inside one block.
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

const LN_EPS: f64 = 1e-5;
pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, q, r) = (cfg.d_model, cfg.d_ff, cfg.query_dim, cfg.repr_dim);
    let mut v = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d], Init::Normal),
        ("pos_emb".to_string(), vec![cfg.max_len, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let n = |s: &str| format!("layer{l}.{s}");
        for w in ["q", "k", "v", "o"] {
            v.push((n(&format!("w{w}")), vec![d, d], Init::Normal));
            v.push((n(&format!("b{w}")), vec![d], Init::Zeros));
        }
        v.push((n("ln1.g"), vec![d], Init::Ones));
        v.push((n("ln1.b"), vec![d], Init::Zeros));
        v.push((n("w1"), vec![d, f], Init::Normal));
        v.push((n("b1"), vec![f], Init::Zeros));
        v.push((n("w2"), vec![f, d], Init::Normal));
        v.push((n("b2"), vec![d], Init::Zeros));
        v.push((n("ln2.g"), vec![d], Init::Ones));
        v.push((n("ln2.b"), vec![d], Init::Zeros));
    }
    v.push(("ln_f.g".to_string(), vec![d], Init::Ones));
    v.push(("ln_f.b".to_string(), vec![d], Init::Zeros));
    v.push(("pool.w".to_string(), vec![d, q], Init::Normal));
    v.push(("pool.b".to_string(), vec![q], Init::Zeros));
    v.push(("pool.q".to_string(), vec![q, 1], Init::Normal));
    v.push(("out.w".to_string(), vec![d, r], Init::Normal));
    v.push(("out.b".to_string(), vec![r], Init::Zeros));
    v
}

/// Packed token ids of several sequences; each sequence is one segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl TokenBatch {
    /// Packs sequences, truncating each to `max_len` tokens.
    pub fn new<S: AsRef<[usize]>>(seqs: &[S], max_len: usize) -> Self {
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = &s.as_ref()[..s.as_ref().len().min(max_len)];
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            lens.push(s.len());
        }
        TokenBatch {
            ids,
            positions,
            segments: pack_segments(lens),
        }
    }

    /// Packs padded sequences, keeping only positions whose mask is set.
    pub fn from_masked(seqs: &[(&[usize], &[bool])], max_len: usize) -> Result<Self> {
        let mut kept = Vec::with_capacity(seqs.len());
        for (toks, mask) in seqs {
            if toks.len() != mask.len() {
                return Err(Error::invalid("token and mask lengths differ"));
            }
            kept.push(
                toks.iter()
                    .zip(mask.iter())
                    .filter(|(_, &m)| m)
                    .map(|(&t, _)| t)
                    .collect::<Vec<_>>(),
            );
        }
        Ok(TokenBatch::new(&kept, max_len))
    }

    pub fn num_sequences(&self) -> usize {
        self.segments.len()
    }
}

/// Transformer news encoder: token + position embeddings, pre-norm
/// transformer blocks, a final layer norm, additive attention pooling over
/// tokens, and a linear output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct NewsEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
}

impl NewsEncoder {
    pub fn new<R: Rng>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        for (name, shape, init) in layout(&cfg) {
            let t = match init {
                Init::Normal => normal_tensor(rng, &shape, INIT_STD),
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::full(&shape, 1.0),
            };
            params.push(name, t);
        }
        Ok(NewsEncoder { cfg, params })
    }

    /// Wraps loaded parameters after checking their layout.
    pub fn from_params(cfg: EncoderConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(&cfg);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "news encoder expects {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in
            expected.iter().zip(params.names().iter().zip(params.tensors()))
        {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "news encoder tensor `{got_name}` {:?} where `{name}` {:?} was expected",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(NewsEncoder { cfg, params })
    }

    fn head_base(&self) -> usize {
        LAYER_BASE + PER_LAYER * self.cfg.n_layers + 2
    }

    /// Indices of the pooling and output-projection tensors.
    pub fn head_indices(&self) -> std::ops::Range<usize> {
        self.head_base()..self.params.len()
    }

    /// Redraws the pooling query/projection and the output layer.
    pub fn reinit_head<R: Rng>(&mut self, rng: &mut R) {
        let (d, q, r) = (self.cfg.d_model, self.cfg.query_dim, self.cfg.repr_dim);
        let base = self.head_base();
        *self.params.get_mut(base) = normal_tensor(rng, &[d, q], INIT_STD);
        *self.params.get_mut(base + 1) = Tensor::zeros(&[q]);
        *self.params.get_mut(base + 2) = normal_tensor(rng, &[q, 1], INIT_STD);
        *self.params.get_mut(base + 3) = normal_tensor(rng, &[d, r], INIT_STD);
        *self.params.get_mut(base + 4) = Tensor::zeros(&[r]);
    }

    /// Whether tensor `idx` trains under a `freeze_below` policy: with
    /// `k > 0` the embeddings and the first `k` blocks stay fixed.
    pub fn is_trainable(&self, idx: usize, freeze_below: usize) -> bool {
        if freeze_below == 0 {
            return true;
        }
        if idx < LAYER_BASE {
            return false;
        }
        let layer = (idx - LAYER_BASE) / PER_LAYER;
        idx >= LAYER_BASE + PER_LAYER * self.cfg.n_layers || layer >= freeze_below
    }

    /// Binds the parameters into `g`; see [`ParamSet::bind`].
    pub fn bind<'p>(&'p self, g: &mut Graph<'p>, group: Option<usize>, freeze_below: usize) -> Vec<Var> {
        self.params.bind(g, group, |i| self.is_trainable(i, freeze_below))
    }

    /// Encodes every sequence of `batch` into a `[num_sequences, repr_dim]`
    /// node.
    pub fn forward(&self, g: &mut Graph<'_>, p: &[Var], batch: &TokenBatch) -> Result<Var> {
        let cfg = &self.cfg;
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: cfg.vocab_size,
            });
        }
        if batch.positions.iter().any(|&pos| pos >= cfg.max_len) {
            return Err(Error::invalid(format!("sequence longer than max_len {}", cfg.max_len)));
        }
        let segs = &batch.segments;
        if batch.ids.is_empty() {
            // Every sequence is empty: pooling yields zeros, output is the bias.
            let zeros = g.constant(Tensor::zeros(&[segs.len(), cfg.d_model]));
            let hb = self.head_base();
            return g.linear(zeros, p[hb + 3], p[hb + 4]);
        }
        let tok = g.gather(p[TOK], &batch.ids)?;
        let pos = g.gather(p[POS], &batch.positions)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..cfg.n_layers {
            let b = LAYER_BASE + l * PER_LAYER;
            let h = g.layer_norm(x, p[b + LN1_G], p[b + LN1_B], LN_EPS)?;
            let q = g.linear(h, p[b + WQ], p[b + BQ])?;
            let k = g.linear(h, p[b + WK], p[b + BK])?;
            let v = g.linear(h, p[b + WV], p[b + BV])?;
            let a = g.segment_attention(q, k, v, segs, cfg.n_heads)?;
            let a = g.linear(a, p[b + WO], p[b + BO])?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, p[b + LN2_G], p[b + LN2_B], LN_EPS)?;
            let f = g.linear(h, p[b + W1], p[b + B1])?;
            let f = g.gelu(f)?;
            let f = g.linear(f, p[b + W2], p[b + B2])?;
            x = g.add(x, f)?;
        }
        let hb = self.head_base();
        let h = g.layer_norm(x, p[hb - 2], p[hb - 1], LN_EPS)?;
        let keys = g.linear(h, p[hb], p[hb + 1])?;
        let keys = g.tanh(keys)?;
        let scores = g.matmul(keys, p[hb + 2])?;
        let alpha = g.segment_softmax(scores, segs)?;
        let pooled = g.segment_weighted_sum(alpha, h, segs)?;
        g.linear(pooled, p[hb + 3], p[hb + 4])
    }

    /// Inference-only encoding of many sequences, one row per sequence.
    pub fn encode<S: AsRef<[usize]>>(&self, seqs: &[S]) -> Result<Vec<Vec<f64>>> {
        let batch = TokenBatch::new(seqs, self.cfg.max_len);
        let mut g = Graph::new();
        let p = self.bind(&mut g, None, 0);
        let out = self.forward(&mut g, &p, &batch)?;
        Ok(g.value(out)
            .chunks(self.cfg.repr_dim)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Representation of one padded sequence; positions with `mask[i] ==
    /// false` are padding and are ignored.
    pub fn encode_news(&self, tokens: &[usize], mask: &[bool]) -> Result<Vec<f64>> {
        let batch = TokenBatch::from_masked(&[(tokens, mask)], self.cfg.max_len)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, None, 0);
        let out = self.forward(&mut g, &p, &batch)?;
        Ok(g.value(out).to_vec())
    }
}
