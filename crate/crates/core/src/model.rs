//! A small pre-norm decoder-only transformer.
//!
//! Each block is `x + Attn(Norm1(x))` followed by `+ FFN(Norm2(·))`, with
//! causal multi-head attention and a two-matrix GELU feed-forward layer, so a
//! block performs exactly the products counted by the cost model: four d×d
//! projections, the score and value-mix products, and two FFN matmuls.
//! Positions are learned absolute embeddings added once, before block 0.
//!
//! Hidden states are indexed by how many blocks have been applied: `H^0` is
//! the position-augmented input and block `b` maps `H^b` to `H^{b+1}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    dot, matmul, matmul_nt, matmul_tn, norm_rows_backward, norm_rows_with_stats, Matrix, NormCache,
    NormKind,
};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub norm_kind: NormKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The default toy recipe used by the harness.
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            hidden: 64,
            heads: 4,
            ffn: 128,
            vocab: 8,
            max_seq: 128,
            norm_kind: NormKind::LayerNorm,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("model needs at least one layer"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocabulary must have at least two entries"));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn == 0 || self.max_seq == 0 {
            return Err(Error::config("ffn and max_seq must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl NormParams {
    pub fn identity(d: usize) -> Self {
        NormParams {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn zeros(d: usize) -> Self {
        NormParams {
            gain: vec![0.0; d],
            bias: vec![0.0; d],
        }
    }

    pub(crate) fn apply(&self, x: &Matrix, kind: NormKind) -> Result<(Matrix, NormCache)> {
        norm_rows_with_stats(x, kind, &self.gain, Some(&self.bias), NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub norm1: NormParams,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm2: NormParams,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// Token embedding table, `vocab × hidden`; used for decode inputs.
    pub embedding: Matrix,
    /// Learned absolute position embeddings, `max_seq × hidden`.
    pub positions: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: NormParams,
    /// Vocabulary head, `hidden × vocab`.
    pub head: Matrix,
}

fn sinusoidal_positions(rows: usize, d: usize) -> Matrix {
    let scale = (2.0 / d as f64).sqrt();
    Matrix::from_fn(rows, d, |p, c| {
        let freq = 10000f64.powf(-((c / 2 * 2) as f64) / d as f64);
        let angle = p as f64 * freq;
        scale * if c % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

impl ModelWeights {
    /// Deterministic scaled-Gaussian initialization from `cfg.seed`. Every
    /// matrix is drawn with standard deviation `1/sqrt(fan_in)`; norms start
    /// at unit gain and zero bias. Position rows start from a sinusoidal table
    /// scaled to unit norm.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, m, v) = (cfg.hidden, cfg.ffn, cfg.vocab);
        let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
        };
        let embedding = gaussian(v, d, d);
        let positions = sinusoidal_positions(cfg.max_seq, d);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(BlockWeights {
                norm1: NormParams::identity(d),
                wq: gaussian(d, d, d),
                wk: gaussian(d, d, d),
                wv: gaussian(d, d, d),
                wo: gaussian(d, d, d),
                norm2: NormParams::identity(d),
                w1: gaussian(d, m, d),
                w2: gaussian(m, d, m),
            });
        }
        let head = gaussian(d, v, d);
        Ok(ModelWeights {
            embedding,
            positions,
            blocks,
            final_norm: NormParams::identity(d),
            head,
        })
    }

    /// All-zero weights of the right shapes (used as a gradient accumulator).
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, m, v) = (cfg.hidden, cfg.ffn, cfg.vocab);
        ModelWeights {
            embedding: Matrix::zeros(v, d),
            positions: Matrix::zeros(cfg.max_seq, d),
            blocks: (0..cfg.layers)
                .map(|_| BlockWeights {
                    norm1: NormParams::zeros(d),
                    wq: Matrix::zeros(d, d),
                    wk: Matrix::zeros(d, d),
                    wv: Matrix::zeros(d, d),
                    wo: Matrix::zeros(d, d),
                    norm2: NormParams::zeros(d),
                    w1: Matrix::zeros(d, m),
                    w2: Matrix::zeros(m, d),
                })
                .collect(),
            final_norm: NormParams::zeros(d),
            head: Matrix::zeros(d, v),
        }
    }

    /// Parameter tensors in checkpoint declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.data(), self.positions.data()];
        for b in &self.blocks {
            out.extend([
                b.norm1.gain.as_slice(),
                b.norm1.bias.as_slice(),
                b.wq.data(),
                b.wk.data(),
                b.wv.data(),
                b.wo.data(),
                b.norm2.gain.as_slice(),
                b.norm2.bias.as_slice(),
                b.w1.data(),
                b.w2.data(),
            ]);
        }
        out.extend([
            self.final_norm.gain.as_slice(),
            self.final_norm.bias.as_slice(),
            self.head.data(),
        ]);
        out
    }

    /// Mutable parameter tensors, same order as [`ModelWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.data_mut(), self.positions.data_mut()];
        for b in &mut self.blocks {
            out.push(b.norm1.gain.as_mut_slice());
            out.push(b.norm1.bias.as_mut_slice());
            out.push(b.wq.data_mut());
            out.push(b.wk.data_mut());
            out.push(b.wv.data_mut());
            out.push(b.wo.data_mut());
            out.push(b.norm2.gain.as_mut_slice());
            out.push(b.norm2.bias.as_mut_slice());
            out.push(b.w1.data_mut());
            out.push(b.w2.data_mut());
        }
        out.push(self.final_norm.gain.as_mut_slice());
        out.push(self.final_norm.bias.as_mut_slice());
        out.push(self.head.data_mut());
        out
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = ModelWeights::zeros(cfg);
        let ours = self.tensors();
        let want = expected.tensors();
        if ours.len() != want.len() {
            return Err(Error::shape(format!(
                "weights have {} tensors, config implies {}",
                ours.len(),
                want.len()
            )));
        }
        for (i, (a, b)) in ours.iter().zip(&want).enumerate() {
            if a.len() != b.len() {
                return Err(Error::shape(format!(
                    "tensor {i} has {} values, config implies {}",
                    a.len(),
                    b.len()
                )));
            }
            if let Some(j) = a.iter().position(|v| !v.is_finite()) {
                return Err(Error::input(format!("tensor {i} has a non-finite value at {j}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Visual,
    Text,
}

/// Embedded prompt rows: one contiguous visual span followed by text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    embeddings: Matrix,
    segments: Vec<Segment>,
    position_ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(embeddings: Matrix, segments: Vec<Segment>, position_ids: Vec<usize>) -> Result<Self> {
        let n = embeddings.rows();
        if segments.len() != n || position_ids.len() != n {
            return Err(Error::shape(format!(
                "{n} embedding rows but {} segment labels and {} positions",
                segments.len(),
                position_ids.len()
            )));
        }
        embeddings.ensure_finite("token embeddings")?;
        if segments.windows(2).any(|w| w[0] == Segment::Text && w[1] == Segment::Visual) {
            return Err(Error::input("visual tokens must precede all text tokens"));
        }
        if position_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::input("position ids must be strictly increasing"));
        }
        Ok(TokenSequence {
            embeddings,
            segments,
            position_ids,
        })
    }

    /// `visual_len` visual rows then text, positions `0..n`.
    pub fn with_layout(embeddings: Matrix, visual_len: usize) -> Result<Self> {
        let n = embeddings.rows();
        if visual_len > n {
            return Err(Error::shape(format!("visual span {visual_len} longer than sequence {n}")));
        }
        let segments = (0..n)
            .map(|i| if i < visual_len { Segment::Visual } else { Segment::Text })
            .collect();
        TokenSequence::new(embeddings, segments, (0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn position_ids(&self) -> &[usize] {
        &self.position_ids
    }

    pub fn visual_len(&self) -> usize {
        self.segments.iter().take_while(|s| **s == Segment::Visual).count()
    }

    pub fn text_len(&self) -> usize {
        self.len() - self.visual_len()
    }

    pub fn with_segments(mut self, segments: Vec<Segment>) -> Result<Self> {
        if segments.len() != self.len() {
            return Err(Error::shape("segment label count mismatch"));
        }
        self.segments = segments;
        TokenSequence::new(self.embeddings, self.segments, self.position_ids)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// Number of blocks applied to produce these states.
    pub layer: usize,
    pub values: Matrix,
    pub segments: Vec<Segment>,
    pub positions: Vec<usize>,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn visual_len(&self) -> usize {
        self.segments.iter().take_while(|s| **s == Segment::Visual).count()
    }

    pub fn text_len(&self) -> usize {
        self.len() - self.visual_len()
    }

    /// Keeps the listed rows (in the given order) with their labels and positions.
    pub fn select_rows(&self, rows: &[usize]) -> HiddenStates {
        HiddenStates {
            layer: self.layer,
            values: self.values.select_rows(rows),
            segments: rows.iter().map(|&r| self.segments[r]).collect(),
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
        }
    }
}

/// How attention is evaluated. `Dense` materializes the score matrix per
/// head; `Streaming` walks one query row at a time with an online softmax and
/// never holds more than a row of scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionBackend {
    #[default]
    Dense,
    Streaming,
}

/// Per-layer key/value rows for autoregressive decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerKv>,
    last_position: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv {
    keys: Vec<f64>,
    values: Vec<f64>,
    positions: Vec<usize>,
    width: usize,
}

impl LayerKv {
    fn new(width: usize) -> Self {
        LayerKv {
            keys: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
            width,
        }
    }

    fn push(&mut self, key: &[f64], value: &[f64], position: usize) {
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        self.positions.push(position);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.width..(i + 1) * self.width]
    }

    fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        KvCache {
            layers: (0..cfg.layers).map(|_| LayerKv::new(cfg.hidden)).collect(),
            last_position: None,
        }
    }

    pub fn layer(&self, b: usize) -> &LayerKv {
        &self.layers[b]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Entry count per layer.
    pub fn lengths(&self) -> Vec<usize> {
        self.layers.iter().map(LayerKv::len).collect()
    }

    pub(crate) fn record(&mut self, b: usize, keys: &Matrix, values: &Matrix, positions: &[usize]) {
        for (r, &p) in positions.iter().enumerate() {
            self.layers[b].push(keys.row(r), values.row(r), p);
        }
        if let Some(&p) = positions.last() {
            self.last_position = Some(self.last_position.map_or(p, |q| q.max(p)));
        }
    }
}

/// Everything one block's forward pass keeps for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BlockTape {
    pub norm1: NormCache,
    pub a: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub attn: AttnTape,
    pub o: Matrix,
    pub norm2: NormCache,
    pub c: Matrix,
    pub u: Matrix,
    pub g: Matrix,
    pub allowed: KeyMask,
}

#[derive(Clone, Debug)]
pub(crate) enum AttnTape {
    /// Per-head `n × n` probabilities.
    Dense(Vec<Matrix>),
    /// Per-head, per-row log-sum-exp of the allowed scores.
    Streaming(Vec<Vec<f64>>),
}

/// Which keys a query row may attend to: causal, optionally minus masked keys.
#[derive(Clone, Debug, Default)]
pub(crate) struct KeyMask {
    excluded: Option<Vec<bool>>,
}

impl KeyMask {
    fn allows(&self, t: usize, j: usize) -> bool {
        j <= t && self.excluded.as_ref().is_none_or(|e| !e[j])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax over the allowed entries of `row`; disallowed entries become 0.
/// A row with nothing allowed is all zeros.
fn masked_softmax(row: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &s) in row.iter().enumerate() {
        if allowed(j) && s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        row.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in row.iter_mut().enumerate() {
        if allowed(j) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    for s in row.iter_mut() {
        *s /= sum;
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub backend: AttentionBackend,
}

/// Output of a full prefill.
#[derive(Clone, Debug)]
pub struct Prefill {
    /// `H^0 ..= H^L`.
    pub hidden: Vec<HiddenStates>,
    /// Logits at the last position after the final block.
    pub logits: Vec<f64>,
    pub cache: KvCache,
}

impl Model {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Model {
            config,
            weights,
            backend: AttentionBackend::Dense,
        })
    }

    pub fn init(config: ModelConfig) -> Result<Self> {
        let weights = ModelWeights::init(&config)?;
        Model::new(config, weights)
    }

    pub fn with_backend(mut self, backend: AttentionBackend) -> Self {
        self.backend = backend;
        self
    }

    /// `H^0`: token embeddings plus their position embeddings.
    pub fn embed(&self, seq: &TokenSequence) -> Result<HiddenStates> {
        if seq.embeddings().cols() != self.config.hidden {
            return Err(Error::shape(format!(
                "embeddings have width {}, model hidden size is {}",
                seq.embeddings().cols(),
                self.config.hidden
            )));
        }
        if seq.len() > self.config.max_seq {
            return Err(Error::shape(format!(
                "sequence of {} exceeds max_seq {}",
                seq.len(),
                self.config.max_seq
            )));
        }
        if let Some(&p) = seq.position_ids().iter().find(|&&p| p >= self.config.max_seq) {
            return Err(Error::shape(format!("position id {p} exceeds max_seq")));
        }
        let mut values = seq.embeddings().clone();
        for (r, &p) in seq.position_ids().iter().enumerate() {
            for (v, e) in values.row_mut(r).iter_mut().zip(self.weights.positions.row(p)) {
                *v += e;
            }
        }
        Ok(HiddenStates {
            layer: 0,
            values,
            segments: seq.segments().to_vec(),
            positions: seq.position_ids().to_vec(),
        })
    }

    pub fn block_forward(&self, h: &HiddenStates) -> Result<HiddenStates> {
        let (out, _) = self.block_forward_taped(h, KeyMask::default())?;
        Ok(out)
    }

    pub(crate) fn block_forward_taped(&self, h: &HiddenStates, allowed: KeyMask) -> Result<(HiddenStates, BlockTape)> {
        let b = h.layer;
        let blk = self
            .weights
            .blocks
            .get(b)
            .ok_or_else(|| Error::shape(format!("no block {b} in a {}-layer model", self.config.layers)))?;
        let (n, d) = h.values.shape();
        if d != self.config.hidden {
            return Err(Error::shape(format!("hidden width {d}, expected {}", self.config.hidden)));
        }
        if n > self.config.max_seq {
            return Err(Error::shape(format!("{n} rows exceed max_seq {}", self.config.max_seq)));
        }
        let kind = self.config.norm_kind;
        let x = &h.values;
        let (a, norm1) = blk.norm1.apply(x, kind)?;
        let q = matmul(&a, &blk.wq)?;
        let k = matmul(&a, &blk.wk)?;
        let v = matmul(&a, &blk.wv)?;
        let (o, attn) = self.attend(&q, &k, &v, &allowed)?;
        let attn_out = matmul(&o, &blk.wo)?;
        let x1 = x.add(&attn_out)?;
        let (c, norm2) = blk.norm2.apply(&x1, kind)?;
        let u = matmul(&c, &blk.w1)?;
        let g = u.map(gelu);
        let f = matmul(&g, &blk.w2)?;
        let y = x1.add(&f)?;
        let out = HiddenStates {
            layer: b + 1,
            values: y,
            segments: h.segments.clone(),
            positions: h.positions.clone(),
        };
        let tape = BlockTape {
            norm1,
            a,
            q,
            k,
            v,
            attn,
            o,
            norm2,
            c,
            u,
            g,
            allowed,
        };
        Ok((out, tape))
    }

    fn attend(&self, q: &Matrix, k: &Matrix, v: &Matrix, allowed: &KeyMask) -> Result<(Matrix, AttnTape)> {
        let n = q.rows();
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut o = Matrix::zeros(n, self.config.hidden);
        match self.backend {
            AttentionBackend::Dense => {
                let mut probs = Vec::with_capacity(self.config.heads);
                for hd in 0..self.config.heads {
                    let (lo, hi) = (hd * dh, (hd + 1) * dh);
                    let (qh, kh, vh) = (q.col_block(lo, hi), k.col_block(lo, hi), v.col_block(lo, hi));
                    let mut p = matmul_nt(&qh, &kh)?;
                    for t in 0..n {
                        let row = p.row_mut(t);
                        for s in row.iter_mut() {
                            *s *= scale;
                        }
                        masked_softmax(row, |j| allowed.allows(t, j));
                    }
                    o.set_col_block(lo, &matmul(&p, &vh)?);
                    probs.push(p);
                }
                Ok((o, AttnTape::Dense(probs)))
            }
            AttentionBackend::Streaming => {
                let mut lse = Vec::with_capacity(self.config.heads);
                let mut acc = vec![0.0; dh];
                for hd in 0..self.config.heads {
                    let (lo, hi) = (hd * dh, (hd + 1) * dh);
                    let mut head_lse = Vec::with_capacity(n);
                    for t in 0..n {
                        let qt = &q.row(t)[lo..hi];
                        let (mut max, mut sum) = (f64::NEG_INFINITY, 0.0);
                        acc.fill(0.0);
                        for j in (0..=t).filter(|&j| allowed.allows(t, j)) {
                            let s = dot(qt, &k.row(j)[lo..hi]) * scale;
                            let new_max = max.max(s);
                            let rescale = (max - new_max).exp();
                            let w = (s - new_max).exp();
                            sum = sum * rescale + w;
                            for (a, vv) in acc.iter_mut().zip(&v.row(j)[lo..hi]) {
                                *a = *a * rescale + w * vv;
                            }
                            max = new_max;
                        }
                        if sum > 0.0 {
                            let orow = &mut o.row_mut(t)[lo..hi];
                            for (out, a) in orow.iter_mut().zip(&acc) {
                                *out = a / sum;
                            }
                            head_lse.push(max + sum.ln());
                        } else {
                            head_lse.push(f64::NEG_INFINITY);
                        }
                    }
                    lse.push(head_lse);
                }
                Ok((o, AttnTape::Streaming(lse)))
            }
        }
    }

    /// Reverse pass of one block. Returns `dL/dx`; weight gradients are
    /// accumulated into `grads` when given.
    pub(crate) fn block_backward(
        &self,
        b: usize,
        tape: &BlockTape,
        dy: &Matrix,
        mut grads: Option<&mut BlockWeights>,
    ) -> Result<Matrix> {
        let blk = &self.weights.blocks[b];
        // FFN branch: y = x1 + gelu(norm2(x1) W1) W2
        let df = dy;
        let dg = matmul_nt(df, &blk.w2)?;
        let mut du = dg;
        for (d, &u) in du.data_mut().iter_mut().zip(tape.u.data()) {
            *d *= gelu_grad(u);
        }
        let dc = matmul_nt(&du, &blk.w1)?;
        if let Some(gr) = grads.as_deref_mut() {
            gr.w2.add_assign(&matmul_tn(&tape.g, df)?)?;
            gr.w1.add_assign(&matmul_tn(&tape.c, &du)?)?;
        }
        let mut dx1 = dy.clone();
        let dx1_ffn = match grads.as_deref_mut() {
            Some(gr) => norm_rows_backward(
                &tape.norm2,
                &blk.norm2.gain,
                &dc,
                Some(&mut gr.norm2.gain),
                Some(&mut gr.norm2.bias),
            ),
            None => norm_rows_backward(&tape.norm2, &blk.norm2.gain, &dc, None, None),
        };
        dx1.add_assign(&dx1_ffn)?;

        // Attention branch: x1 = x + attn(norm1(x)) Wo
        let d_o = matmul_nt(&dx1, &blk.wo)?;
        if let Some(gr) = grads.as_deref_mut() {
            gr.wo.add_assign(&matmul_tn(&tape.o, &dx1)?)?;
        }
        let (dq, dk, dv) = self.attend_backward(tape, &d_o)?;
        let mut da = matmul_nt(&dq, &blk.wq)?;
        da.add_assign(&matmul_nt(&dk, &blk.wk)?)?;
        da.add_assign(&matmul_nt(&dv, &blk.wv)?)?;
        if let Some(gr) = grads.as_deref_mut() {
            gr.wq.add_assign(&matmul_tn(&tape.a, &dq)?)?;
            gr.wk.add_assign(&matmul_tn(&tape.a, &dk)?)?;
            gr.wv.add_assign(&matmul_tn(&tape.a, &dv)?)?;
        }
        let dx_attn = match grads {
            Some(gr) => norm_rows_backward(
                &tape.norm1,
                &blk.norm1.gain,
                &da,
                Some(&mut gr.norm1.gain),
                Some(&mut gr.norm1.bias),
            ),
            None => norm_rows_backward(&tape.norm1, &blk.norm1.gain, &da, None, None),
        };
        let mut dx = dx1;
        dx.add_assign(&dx_attn)?;
        Ok(dx)
    }

    fn attend_backward(&self, tape: &BlockTape, d_o: &Matrix) -> Result<(Matrix, Matrix, Matrix)> {
        let n = tape.q.rows();
        let d = self.config.hidden;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for hd in 0..self.config.heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            match &tape.attn {
                AttnTape::Dense(probs) => {
                    let p = &probs[hd];
                    let (qh, kh, vh) = (tape.q.col_block(lo, hi), tape.k.col_block(lo, hi), tape.v.col_block(lo, hi));
                    let doh = d_o.col_block(lo, hi);
                    let dp = matmul_nt(&doh, &vh)?;
                    dv.set_col_block(lo, &matmul_tn(p, &doh)?);
                    let mut ds = Matrix::zeros(n, n);
                    for t in 0..n {
                        let (prow, dprow) = (p.row(t), dp.row(t));
                        let inner = dot(prow, dprow);
                        let dsrow = ds.row_mut(t);
                        for j in 0..n {
                            dsrow[j] = prow[j] * (dprow[j] - inner) * scale;
                        }
                    }
                    dq.set_col_block(lo, &matmul(&ds, &kh)?);
                    dk.set_col_block(lo, &matmul_tn(&ds, &qh)?);
                }
                AttnTape::Streaming(lse) => {
                    let lse = &lse[hd];
                    let mut probs = Vec::with_capacity(n);
                    for t in 0..n {
                        if lse[t] == f64::NEG_INFINITY {
                            continue;
                        }
                        let qt = &tape.q.row(t)[lo..hi];
                        let dot_t = &d_o.row(t)[lo..hi];
                        probs.clear();
                        let mut inner = 0.0;
                        for j in (0..=t).filter(|&j| tape.allowed.allows(t, j)) {
                            let s = dot(qt, &tape.k.row(j)[lo..hi]) * scale;
                            let p = (s - lse[t]).exp();
                            let dp = dot(dot_t, &tape.v.row(j)[lo..hi]);
                            inner += p * dp;
                            probs.push((j, p, dp));
                        }
                        for &(j, p, dp) in &probs {
                            let ds = p * (dp - inner) * scale;
                            for c in lo..hi {
                                dq.data_mut()[t * d + c] += ds * tape.k.get(j, c);
                                dk.data_mut()[j * d + c] += ds * tape.q.get(t, c);
                                dv.data_mut()[j * d + c] += p * d_o.get(t, c);
                            }
                        }
                    }
                }
            }
        }
        Ok((dq, dk, dv))
    }

    /// Per-head attention probabilities of block `h.layer` over `h`.
    /// Materializes `n × n` matrices; only the attention-score baseline uses it.
    pub fn attention_probabilities(&self, h: &HiddenStates) -> Result<Vec<Matrix>> {
        let dense = Model {
            config: self.config.clone(),
            weights: self.weights.clone(),
            backend: AttentionBackend::Dense,
        };
        let (_, tape) = dense.block_forward_taped(h, KeyMask::default())?;
        match tape.attn {
            AttnTape::Dense(p) => Ok(p),
            AttnTape::Streaming(_) => unreachable!("dense backend"),
        }
    }

    /// Final norm then head, applied to the requested rows only.
    pub fn head_logits(&self, h: &HiddenStates, positions: &[usize]) -> Result<Matrix> {
        self.project(h, positions, &self.weights.final_norm).map(|(z, _)| z)
    }

    pub(crate) fn project(&self, h: &HiddenStates, rows: &[usize], norm: &NormParams) -> Result<(Matrix, NormCache)> {
        if let Some(&r) = rows.iter().find(|&&r| r >= h.len()) {
            return Err(Error::shape(format!("position {r} out of range for {} rows", h.len())));
        }
        let selected = h.values.select_rows(rows);
        let (normed, cache) = norm.apply(&selected, self.config.norm_kind)?;
        Ok((matmul(&normed, &self.weights.head)?, cache))
    }

    pub fn prefill(&self, seq: &TokenSequence) -> Result<Prefill> {
        self.prefill_inner(seq, KeyMask::default())
    }

    /// Prefill where every `excluded` token is removed from the key set of
    /// every layer (its own row is still computed).
    pub fn prefill_with_key_mask(&self, seq: &TokenSequence, excluded: &[bool]) -> Result<Prefill> {
        if excluded.len() != seq.len() {
            return Err(Error::shape("key mask length differs from sequence length"));
        }
        self.prefill_inner(
            seq,
            KeyMask {
                excluded: Some(excluded.to_vec()),
            },
        )
    }

    fn prefill_inner(&self, seq: &TokenSequence, mask: KeyMask) -> Result<Prefill> {
        if seq.is_empty() {
            return Err(Error::input("cannot prefill an empty sequence"));
        }
        let mut h = self.embed(seq)?;
        let mut cache = KvCache::new(&self.config);
        let mut hidden = Vec::with_capacity(self.config.layers + 1);
        for b in 0..self.config.layers {
            let (next, tape) = self.block_forward_taped(&h, mask.clone())?;
            cache.record(b, &tape.k, &tape.v, &h.positions);
            hidden.push(h);
            h = next;
        }
        let logits = self.head_logits(&h, &[h.len() - 1])?.into_data();
        hidden.push(h);
        Ok(Prefill { hidden, logits, cache })
    }

    /// One autoregressive step: `embedding` (a raw token embedding, before
    /// positions) at `position`, attending over the cache plus itself.
    pub fn decode_step(&self, cache: &mut KvCache, embedding: &[f64], position: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if cache.layers.len() != cfg.layers || cache.layers.iter().any(|l| l.width != cfg.hidden) {
            return Err(Error::shape("cache does not match model configuration"));
        }
        if embedding.len() != cfg.hidden {
            return Err(Error::shape(format!("embedding width {}, expected {}", embedding.len(), cfg.hidden)));
        }
        if position >= cfg.max_seq || cache.last_position.is_some_and(|p| position <= p) {
            return Err(Error::input(format!("decode position {position} is not after the cached prefix")));
        }
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = Matrix::new(1, cfg.hidden, embedding.to_vec())?;
        for (v, e) in x.row_mut(0).iter_mut().zip(self.weights.positions.row(position)) {
            *v += e;
        }
        for (b, blk) in self.weights.blocks.iter().enumerate() {
            let (a, _) = blk.norm1.apply(&x, cfg.norm_kind)?;
            let q = matmul(&a, &blk.wq)?;
            let k = matmul(&a, &blk.wk)?;
            let v = matmul(&a, &blk.wv)?;
            let layer = &mut cache.layers[b];
            layer.push(k.row(0), v.row(0), position);
            let mut o = Matrix::zeros(1, cfg.hidden);
            let mut scores = vec![0.0; layer.len()];
            for hd in 0..cfg.heads {
                let (lo, hi) = (hd * dh, (hd + 1) * dh);
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(&q.row(0)[lo..hi], &layer.key(j)[lo..hi]) * scale;
                }
                masked_softmax(&mut scores, |_| true);
                let orow = &mut o.row_mut(0)[lo..hi];
                for (j, &p) in scores.iter().enumerate() {
                    for (out, vv) in orow.iter_mut().zip(&layer.value(j)[lo..hi]) {
                        *out += p * vv;
                    }
                }
            }
            let x1 = x.add(&matmul(&o, &blk.wo)?)?;
            let (c, _) = blk.norm2.apply(&x1, cfg.norm_kind)?;
            let g = matmul(&c, &blk.w1)?.map(gelu);
            x = x1.add(&matmul(&g, &blk.w2)?)?;
        }
        cache.last_position = Some(position);
        let (normed, _) = self.weights.final_norm.apply(&x, cfg.norm_kind)?;
        Ok(matmul(&normed, &self.weights.head)?.into_data())
    }
}
