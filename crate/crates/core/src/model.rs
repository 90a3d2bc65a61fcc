//! Toy attention encoder-decoder.
//!
//! Encoder: average-pool subsampling by `subsample_factor`, a linear input
//! projection, one temporal mixing layer over a `2r + 1` frame window, and an
//! output layer producing the encoder states `h`. A linear CTC head on `h`
//! scores content tokens plus blank.
//!
//! Decoder: an Elman recurrence over the previous output embedding, the
//! previous state and the previous attention context, single-head scaled
//! dot-product cross-attention over `[h, position]`, and an output projection
//! onto content, `<sc>` and `<eos>`.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::vocab::{TokenId, TokenSequence, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    /// Linear encoder, for shape and linearity checks.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden: usize,
    pub content_size: usize,
    pub subsample_factor: usize,
    pub context_radius: usize,
    /// Sinusoidal position features appended to the attention memory.
    pub position_dims: usize,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(feature_dim: usize, content_size: usize) -> Self {
        ModelConfig {
            feature_dim,
            hidden: 32,
            content_size,
            subsample_factor: 4,
            context_radius: 1,
            position_dims: 8,
            activation: Activation::Tanh,
        }
    }

    pub fn ctc_classes(&self) -> usize {
        self.content_size + 1
    }

    pub fn output_classes(&self) -> usize {
        self.content_size + 2
    }

    /// Attention memory width: `h` plus position features.
    pub fn memory_dim(&self) -> usize {
        self.hidden + self.position_dims
    }

    fn pad_row(&self) -> usize {
        self.output_classes()
    }

    fn sos_row(&self) -> usize {
        self.output_classes() + 1
    }

    fn shape(&self, p: Param) -> (usize, usize) {
        let h = self.hidden;
        let d = self.memory_dim();
        match p {
            Param::EncInW => (self.feature_dim, h),
            Param::EncMixW => ((2 * self.context_radius + 1) * h, h),
            Param::EncOutW => (h, h),
            Param::EncInB | Param::EncMixB | Param::EncOutB | Param::DecRecB | Param::DecCombB => (1, h),
            Param::CtcW => (h, self.ctc_classes()),
            Param::CtcB => (1, self.ctc_classes()),
            Param::DecEmb => (self.output_classes() + 2, h),
            Param::DecRecW => (2 * h + d, h),
            Param::DecQuery => (h, h),
            Param::DecKey => (d, h),
            Param::DecCombW => (h + d, h),
            Param::DecOutW => (h, self.output_classes()),
            Param::DecOutB => (1, self.output_classes()),
        }
    }

    /// Encoder frames produced for `frames` input frames.
    pub fn encoder_frames(&self, frames: usize) -> usize {
        frames / self.subsample_factor
    }
}

/// Parameter tensors in checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Param {
    EncInW,
    EncInB,
    EncMixW,
    EncMixB,
    EncOutW,
    EncOutB,
    CtcW,
    CtcB,
    DecEmb,
    DecRecW,
    DecRecB,
    DecQuery,
    DecKey,
    DecCombW,
    DecCombB,
    DecOutW,
    DecOutB,
}

impl Param {
    pub const ALL: [Param; 17] = [
        Param::EncInW,
        Param::EncInB,
        Param::EncMixW,
        Param::EncMixB,
        Param::EncOutW,
        Param::EncOutB,
        Param::CtcW,
        Param::CtcB,
        Param::DecEmb,
        Param::DecRecW,
        Param::DecRecB,
        Param::DecQuery,
        Param::DecKey,
        Param::DecCombW,
        Param::DecCombB,
        Param::DecOutW,
        Param::DecOutB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::EncInW => "encoder.input.weight",
            Param::EncInB => "encoder.input.bias",
            Param::EncMixW => "encoder.mix.weight",
            Param::EncMixB => "encoder.mix.bias",
            Param::EncOutW => "encoder.output.weight",
            Param::EncOutB => "encoder.output.bias",
            Param::CtcW => "ctc_head.weight",
            Param::CtcB => "ctc_head.bias",
            Param::DecEmb => "decoder.embedding",
            Param::DecRecW => "decoder.recurrence.weight",
            Param::DecRecB => "decoder.recurrence.bias",
            Param::DecQuery => "decoder.attention.query",
            Param::DecKey => "decoder.attention.key",
            Param::DecCombW => "decoder.combine.weight",
            Param::DecCombB => "decoder.combine.bias",
            Param::DecOutW => "decoder.output.weight",
            Param::DecOutB => "decoder.output.bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Param> {
        Param::ALL.into_iter().find(|p| p.name() == name)
    }

    fn is_bias(self) -> bool {
        matches!(
            self,
            Param::EncInB
                | Param::EncMixB
                | Param::EncOutB
                | Param::CtcB
                | Param::DecRecB
                | Param::DecCombB
                | Param::DecOutB
        )
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Model parameters; one tensor per [`Param`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Vec<Matrix<T>>,
}

/// Gradient tensors aligned with [`Model::params`].
pub type Gradients<T> = Vec<Matrix<T>>;

/// Graph handles produced by [`Model::encode`].
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub h: Var,
    pub grid: Var,
    memory: Var,
    keys: Var,
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderPass {
    /// `n x output_classes` logits.
    pub logits: Var,
    /// `1 x T'` attention weights, one per output position.
    pub attention: Vec<Var>,
}

/// Graph plus the handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub graph: Graph<T>,
    pub encoded: Encoded,
}

#[derive(Clone, Copy)]
struct DecoderState {
    state: Var,
    context: Var,
}

impl<T: Scalar> Model<T> {
    pub fn zeros(config: ModelConfig) -> Self {
        let params = Param::ALL
            .iter()
            .map(|&p| {
                let (r, c) = config.shape(p);
                Matrix::zeros(r, c)
            })
            .collect();
        Model { config, params }
    }

    /// Scaled normal weights (std `1/sqrt(fan_in)`), zero biases.
    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Self {
        let mut model = Self::zeros(config);
        for p in Param::ALL {
            if p.is_bias() {
                continue;
            }
            let m = &mut model.params[p.index()];
            let std = if p == Param::DecEmb {
                1.0
            } else {
                1.0 / (m.rows() as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for x in m.as_mut_slice() {
                *x = T::from_f64_lossy(normal.sample(rng));
            }
        }
        model
    }

    pub fn param(&self, p: Param) -> &Matrix<T> {
        &self.params[p.index()]
    }

    pub fn param_mut(&mut self, p: Param) -> &mut Matrix<T> {
        &mut self.params[p.index()]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|m| m.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Matrix::is_finite)
    }

    fn check_shapes(&self) -> Result<()> {
        for p in Param::ALL {
            if self.params[p.index()].shape() != self.config.shape(p) {
                return Err(Error::Shape(format!(
                    "{} is {:?}, expected {:?}",
                    p.name(),
                    self.params[p.index()].shape(),
                    self.config.shape(p)
                )));
            }
        }
        Ok(())
    }

    fn leaf(&self, g: &mut Graph<T>, p: Param) -> Var {
        g.param(p.index(), &self.params[p.index()])
    }

    fn activate(&self, g: &mut Graph<T>, x: Var) -> Var {
        match self.config.activation {
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }

    fn positions(&self, frames: usize) -> Matrix<T> {
        Matrix::from_fn(frames, self.config.position_dims, |t, j| {
            let period = 4.0 * f64::powi(2.0, (j / 2) as i32);
            let angle = std::f64::consts::TAU * t as f64 / period;
            T::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() })
        })
    }

    /// Encoder states and CTC grid for a `T x F` feature matrix.
    pub fn encode(&self, g: &mut Graph<T>, features: &Matrix<T>) -> Result<Encoded> {
        let cfg = &self.config;
        if features.cols() != cfg.feature_dim {
            return Err(Error::Shape(format!(
                "features have {} dims, model expects {}",
                features.cols(),
                cfg.feature_dim
            )));
        }
        if features.rows() < cfg.subsample_factor {
            return Err(Error::InputTooShort {
                frames: features.rows(),
                factor: cfg.subsample_factor,
            });
        }
        // Pooling commutes with the affine input projection, so pool first.
        let x = g.input(features.clone());
        let pooled = g.avg_pool(x, cfg.subsample_factor);
        let (w, b) = (self.leaf(g, Param::EncInW), self.leaf(g, Param::EncInB));
        let projected = g.affine(pooled, w, b);
        let window = g.context(projected, cfg.context_radius);
        let (w, b) = (self.leaf(g, Param::EncMixW), self.leaf(g, Param::EncMixB));
        let mixed = g.affine(window, w, b);
        let mixed = self.activate(g, mixed);
        let (w, b) = (self.leaf(g, Param::EncOutW), self.leaf(g, Param::EncOutB));
        let h = g.affine(mixed, w, b);
        let h = self.activate(g, h);
        let (w, b) = (self.leaf(g, Param::CtcW), self.leaf(g, Param::CtcB));
        let grid = g.affine(h, w, b);

        let frames = g.value(h).rows();
        let pos = g.input(self.positions(frames));
        let memory = g.concat_cols(&[h, pos]);
        let key_w = self.leaf(g, Param::DecKey);
        let keys = g.matmul(memory, key_w);
        Ok(Encoded {
            h,
            grid,
            memory,
            keys,
            frames,
        })
    }

    fn initial_state(&self, g: &mut Graph<T>) -> DecoderState {
        let state = g.input(Matrix::zeros(1, self.config.hidden));
        let context = g.input(Matrix::zeros(1, self.config.memory_dim()));
        DecoderState { state, context }
    }

    /// One decoder step fed with embedding row `input_row`.
    fn step(&self, g: &mut Graph<T>, enc: &Encoded, prev: DecoderState, input_row: usize) -> (DecoderState, Var, Var) {
        let emb = self.leaf(g, Param::DecEmb);
        let e = g.row(emb, input_row);
        let z = g.concat_cols(&[e, prev.state, prev.context]);
        let (w, b) = (self.leaf(g, Param::DecRecW), self.leaf(g, Param::DecRecB));
        let s = g.affine(z, w, b);
        let s = g.tanh(s);

        let wq = self.leaf(g, Param::DecQuery);
        let q = g.matmul(s, wq);
        let scores = g.matmul_nt(q, enc.keys);
        let scale = T::one() / T::from_usize_lossy(self.config.hidden).sqrt();
        let scores = g.scale(scores, scale);
        let attn = g.softmax_rows(scores);
        let context = g.matmul(attn, enc.memory);

        let sc = g.concat_cols(&[s, context]);
        let (w, b) = (self.leaf(g, Param::DecCombW), self.leaf(g, Param::DecCombB));
        let o = g.affine(sc, w, b);
        let o = g.tanh(o);
        let (w, b) = (self.leaf(g, Param::DecOutW), self.leaf(g, Param::DecOutB));
        let logits = g.affine(o, w, b);
        (DecoderState { state: s, context }, logits, attn)
    }

    fn input_row(&self, vocab: &Vocabulary, token: TokenId) -> usize {
        if token == vocab.pad_id() {
            self.config.pad_row()
        } else {
            vocab
                .to_output(token)
                .expect("decoder inputs are content, <sc>, <eos> or pad")
        }
    }

    /// Teacher-forced decoder logits: row `n` sees target tokens `< n`.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph<T>,
        enc: &Encoded,
        target: &[TokenId],
        vocab: &Vocabulary,
    ) -> Result<DecoderPass> {
        if target.is_empty() {
            return Err(Error::Shape("empty decoder target".into()));
        }
        if let Some(first_pad) = target.iter().position(|&t| t == vocab.pad_id()) {
            if let Some(off) = target[first_pad..].iter().position(|&t| t != vocab.pad_id()) {
                return Err(Error::PadInTarget(first_pad + off - 1));
            }
        }
        if let Some(&bad) = target
            .iter()
            .find(|&&t| t != vocab.pad_id() && vocab.to_output(t).is_none())
        {
            return Err(Error::NotContent(bad));
        }
        let mut st = self.initial_state(g);
        let mut rows = Vec::with_capacity(target.len());
        let mut attention = Vec::with_capacity(target.len());
        let mut input = self.config.sos_row();
        for &tok in target {
            let (next, logits, attn) = self.step(g, enc, st, input);
            st = next;
            rows.push(logits);
            attention.push(attn);
            input = self.input_row(vocab, tok);
        }
        let logits = g.stack_rows(&rows);
        Ok(DecoderPass { logits, attention })
    }

    /// Argmax decoding until `<eos>` or `max_len` tokens; `<eos>` is not returned.
    pub fn decode_greedy(&self, g: &mut Graph<T>, enc: &Encoded, max_len: usize, vocab: &Vocabulary) -> TokenSequence {
        let mut st = self.initial_state(g);
        let mut input = self.config.sos_row();
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (next, logits, _) = self.step(g, enc, st, input);
            st = next;
            let row = g.value(logits).row(0);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            let tok = vocab.from_output(best);
            if tok == vocab.eos_id() {
                break;
            }
            out.push(tok);
            input = best;
        }
        TokenSequence::new(out)
    }

    /// Encodes `features` and greedy-decodes in a fresh graph.
    pub fn transcribe(&self, features: &Matrix<T>, max_len: usize, vocab: &Vocabulary) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, features)?;
        Ok(self.decode_greedy(&mut g, &enc, max_len, vocab))
    }

    /// Encoder forward in a fresh graph.
    pub fn forward(&self, features: &Matrix<T>) -> Result<ForwardTrace<T>> {
        let mut graph = Graph::new();
        let encoded = self.encode(&mut graph, features)?;
        Ok(ForwardTrace { graph, encoded })
    }

    /// Parameter gradients for the given output adjoints (for example the CTC
    /// grid gradient and the decoder logit gradient).
    pub fn backward(&self, graph: &Graph<T>, seeds: &[(Var, &Matrix<T>)]) -> Result<Gradients<T>> {
        for &(v, g) in seeds {
            if graph.value(v).shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "adjoint {:?} does not match output {:?}",
                    g.shape(),
                    graph.value(v).shape()
                )));
            }
        }
        let mut raw = graph.backward(seeds);
        raw.resize(self.params.len(), None);
        Ok(raw
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Matrix::zeros(p.rows(), p.cols())))
            .collect())
    }

    /// Element-wise mean of checkpoints, accumulated as a running mean so that
    /// identical inputs reproduce themselves exactly.
    pub fn average(models: &[Model<T>]) -> Result<Model<T>> {
        let first = models
            .first()
            .ok_or_else(|| Error::Shape("no checkpoints to average".into()))?;
        let mut mean = first.clone();
        for (k, m) in models.iter().enumerate().skip(1) {
            if m.config != first.config {
                return Err(Error::Shape("checkpoints with different configurations".into()));
            }
            let inv = T::one() / T::from_usize_lossy(k + 1);
            for (acc, p) in mean.params.iter_mut().zip(&m.params) {
                for (a, &x) in acc.as_mut_slice().iter_mut().zip(p.as_slice()) {
                    *a += (x - *a) * inv;
                }
            }
        }
        Ok(mean)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.iter().map(Matrix::cast).collect(),
        }
    }

    fn from_params(config: ModelConfig, params: Vec<Matrix<T>>) -> Result<Self> {
        let m = Model { config, params };
        m.check_shapes()?;
        Ok(m)
    }
}

/// Attention weights of each teacher-forced row, as values.
pub fn attention_rows<T: Scalar>(g: &Graph<T>, pass: &DecoderPass) -> Vec<Vec<T>> {
    pass.attention.iter().map(|&a| g.value(a).row(0).to_vec()).collect()
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SOTM";
pub const CHECKPOINT_VERSION: u32 = 1;

const CONFIG_KEYS: [&str; 7] = [
    "config.feature_dim",
    "config.hidden",
    "config.content_size",
    "config.subsample_factor",
    "config.context_radius",
    "config.position_dims",
    "config.activation",
];

impl ModelConfig {
    fn to_values(&self) -> [usize; 7] {
        [
            self.feature_dim,
            self.hidden,
            self.content_size,
            self.subsample_factor,
            self.context_radius,
            self.position_dims,
            match self.activation {
                Activation::Tanh => 0,
                Activation::Identity => 1,
            },
        ]
    }
}

struct Tensor {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&u32::try_from(x).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f64>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len());
    for &d in dims {
        put_u32(out, d);
    }
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.at..self.at.checked_add(n)?)?;
        self.at += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn tensor(&mut self) -> Option<Tensor> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec()).ok()?;
        let rank = self.u32()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Option<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
        let raw = self.take(count.checked_mul(8)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Some(Tensor { name, dims, data })
    }
}

impl<T: Scalar> Model<T> {
    /// Checkpoint bytes: magic, version, tensor count, then each tensor as
    /// name length, name, rank, dims and `f64` data. The architecture is
    /// stored as scalar `config.*` tensors ahead of the parameters.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, CONFIG_KEYS.len() + self.params.len());
        for (name, v) in CONFIG_KEYS.iter().zip(self.config.to_values()) {
            put_tensor(&mut out, name, &[1], std::iter::once(v as f64));
        }
        for p in Param::ALL {
            let m = self.param(p);
            put_tensor(
                &mut out,
                p.name(),
                &[m.rows(), m.cols()],
                m.as_slice().iter().map(|x| x.to_f64_lossy()),
            );
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_owned());
        if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut cur = Cursor { bytes, at: 4 };
        let version = cur.u32().expect("length checked");
        if version != CHECKPOINT_VERSION as usize {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let count = cur.u32().expect("length checked");
        let mut config = [None; 7];
        let mut params: Vec<Option<Matrix<T>>> = vec![None; Param::ALL.len()];
        for _ in 0..count {
            let t = cur.tensor().ok_or_else(|| bad("truncated tensor"))?;
            if let Some(k) = CONFIG_KEYS.iter().position(|&n| n == t.name) {
                let v = t.data.first().copied().filter(|v| *v >= 0.0 && v.fract() == 0.0);
                config[k] = Some(v.ok_or_else(|| bad(&format!("{} is not a count", t.name)))? as usize);
            } else if let Some(p) = Param::from_name(&t.name) {
                if t.dims.len() != 2 {
                    return Err(bad(&format!("{} has rank {}", t.name, t.dims.len())));
                }
                let data = t.data.into_iter().map(T::from_f64_lossy).collect();
                params[p.index()] = Some(Matrix::from_vec(t.dims[0], t.dims[1], data));
            } else {
                return Err(bad(&format!("unknown tensor {}", t.name)));
            }
        }
        if cur.at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let mut v = [0usize; 7];
        for (k, slot) in config.iter().enumerate() {
            v[k] = slot.ok_or_else(|| bad(&format!("missing {}", CONFIG_KEYS[k])))?;
        }
        let activation = match v[6] {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            other => return Err(bad(&format!("unknown activation code {other}"))),
        };
        let config = ModelConfig {
            feature_dim: v[0],
            hidden: v[1],
            content_size: v[2],
            subsample_factor: v[3],
            context_radius: v[4],
            position_dims: v[5],
            activation,
        };
        let params = params
            .into_iter()
            .zip(Param::ALL)
            .map(|(m, p)| m.ok_or_else(|| bad(&format!("missing {}", p.name()))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_params(config, params).map_err(|e| bad(&e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}
