//! Transformer building blocks over a [`Graph`], with weights looked up by
//! name in a [`ParamStore`]. Every block uses pre-layer-normalization
//! residual sublayers.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, Mask, NnError, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal table: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor, NnError> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(NnError::OddDModel(d_model));
    }
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
}

impl AttentionConfig {
    pub fn new(d_model: usize, n_heads: usize) -> Result<Self, NnError> {
        if n_heads == 0 || d_model == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(NnError::InvalidConfig(format!(
                "n_heads ({n_heads}) must divide d_model ({d_model})"
            )));
        }
        Ok(AttentionConfig { d_model, n_heads })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Training mode draws dropout masks from its own generator; eval mode is
/// deterministic and dropout-free.
pub enum ForwardMode {
    Eval,
    Train { dropout: f64, rng: ChaCha8Rng },
}

impl ForwardMode {
    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var, NnError> {
        match self {
            ForwardMode::Eval => Ok(x),
            ForwardMode::Train { dropout, rng } => g.dropout(x, *dropout, rng),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, ForwardMode::Train { .. })
    }
}

/// `softmax(QKᵀ/√d_k)·V`, with blocked mask entries excluded from the
/// softmax. Returns the output and the attention weights.
pub fn attention_with_weights(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Rc<Mask>>,
) -> Result<(Var, Var), NnError> {
    let (lq, dk) = g.value(q).require_matrix("attention")?;
    let (lk, dk2) = g.value(k).require_matrix("attention")?;
    let (lv, _) = g.value(v).require_matrix("attention")?;
    if dk != dk2 || lk != lv {
        return Err(NnError::ShapeMismatch {
            op: "attention",
            left: vec![lq, dk],
            right: vec![lk, dk2, lv],
        });
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = match mask {
        Some(m) => g.masked_softmax(scores, m)?,
        None => g.softmax(scores, 1)?,
    };
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Rc<Mask>>,
) -> Result<Var, NnError> {
    attention_with_weights(g, q, k, v, mask).map(|(out, _)| out)
}

/// `x·W + b` with `W = {prefix}.w`, `b = {prefix}.b`.
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, NnError> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn init_linear<R: Rng>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.xavier(&format!("{prefix}.w"), fan_in, fan_out, rng);
    store.zeros(&format!("{prefix}.b"), &[fan_out]);
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var, NnError> {
    let gain = g.param(store, &format!("{prefix}.gain"))?;
    let bias = g.param(store, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.ones(&format!("{prefix}.gain"), &[d]);
    store.zeros(&format!("{prefix}.bias"), &[d]);
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn new(prefix: impl Into<String>, cfg: AttentionConfig) -> Self {
        MultiHeadAttention {
            prefix: prefix.into(),
            cfg,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.cfg.d_model;
        for proj in ["q", "k", "v", "o"] {
            init_linear(store, &format!("{}.{proj}", self.prefix), d, d, rng);
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        memory: Var,
        mask: Option<Rc<Mask>>,
    ) -> Result<Var, NnError> {
        let p = &self.prefix;
        let q = linear(g, store, &format!("{p}.q"), query)?;
        let k = linear(g, store, &format!("{p}.k"), memory)?;
        let v = linear(g, store, &format!("{p}.v"), memory)?;
        let dk = self.cfg.d_k();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (s, e) = (h * dk, (h + 1) * dk);
            let qh = g.slice_cols(q, s, e)?;
            let kh = g.slice_cols(k, s, e)?;
            let vh = g.slice_cols(v, s, e)?;
            heads.push(scaled_dot_product_attention(g, qh, kh, vh, mask.clone())?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        linear(g, store, &format!("{p}.o"), joined)
    }
}

/// Position-wise `GELU(x·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub prefix: String,
    pub d_model: usize,
    pub d_ff: usize,
}

impl FeedForward {
    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        init_linear(store, &format!("{}.in", self.prefix), self.d_model, self.d_ff, rng);
        init_linear(store, &format!("{}.out", self.prefix), self.d_ff, self.d_model, rng);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let h = linear(g, store, &format!("{}.in", self.prefix), x)?;
        let h = g.gelu(h);
        linear(g, store, &format!("{}.out", self.prefix), h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub attention: AttentionConfig,
    pub d_ff: usize,
}

/// Self-attention and feed-forward sublayers.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    prefix: String,
    attn: MultiHeadAttention,
    ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(prefix: impl Into<String>, dims: BlockDims) -> Self {
        let prefix = prefix.into();
        EncoderLayer {
            attn: MultiHeadAttention::new(format!("{prefix}.attn"), dims.attention),
            ffn: FeedForward {
                prefix: format!("{prefix}.ffn"),
                d_model: dims.attention.d_model,
                d_ff: dims.d_ff,
            },
            prefix,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.attn.cfg.d_model;
        init_layer_norm(store, &format!("{}.ln1", self.prefix), d);
        self.attn.init(store, rng);
        init_layer_norm(store, &format!("{}.ln2", self.prefix), d);
        self.ffn.init(store, rng);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<Rc<Mask>>,
        mode: &mut ForwardMode,
    ) -> Result<Var, NnError> {
        let h = layer_norm(g, store, &format!("{}.ln1", self.prefix), x)?;
        let a = self.attn.forward(g, store, h, h, mask)?;
        let a = mode.dropout(g, a)?;
        let x = g.add(x, a)?;
        let h = layer_norm(g, store, &format!("{}.ln2", self.prefix), x)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = mode.dropout(g, f)?;
        g.add(x, f)
    }
}

/// Masked self-attention, cross-attention over encoder memory, then a
/// feed-forward sublayer.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    prefix: String,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(prefix: impl Into<String>, dims: BlockDims) -> Self {
        let prefix = prefix.into();
        DecoderLayer {
            self_attn: MultiHeadAttention::new(format!("{prefix}.self"), dims.attention),
            cross_attn: MultiHeadAttention::new(format!("{prefix}.cross"), dims.attention),
            ffn: FeedForward {
                prefix: format!("{prefix}.ffn"),
                d_model: dims.attention.d_model,
                d_ff: dims.d_ff,
            },
            prefix,
        }
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.self_attn.cfg.d_model;
        init_layer_norm(store, &format!("{}.ln1", self.prefix), d);
        self.self_attn.init(store, rng);
        init_layer_norm(store, &format!("{}.ln2", self.prefix), d);
        self.cross_attn.init(store, rng);
        init_layer_norm(store, &format!("{}.ln3", self.prefix), d);
        self.ffn.init(store, rng);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        memory: Var,
        self_mask: Rc<Mask>,
        cross_mask: Option<Rc<Mask>>,
        mode: &mut ForwardMode,
    ) -> Result<Var, NnError> {
        let p = &self.prefix;
        let h = layer_norm(g, store, &format!("{p}.ln1"), x)?;
        let a = self.self_attn.forward(g, store, h, h, Some(self_mask))?;
        let a = mode.dropout(g, a)?;
        let x = g.add(x, a)?;
        let h = layer_norm(g, store, &format!("{p}.ln2"), x)?;
        let c = self.cross_attn.forward(g, store, h, memory, cross_mask)?;
        let c = mode.dropout(g, c)?;
        let x = g.add(x, c)?;
        let h = layer_norm(g, store, &format!("{p}.ln3"), x)?;
        let f = self.ffn.forward(g, store, h)?;
        let f = mode.dropout(g, f)?;
        g.add(x, f)
    }
}

/// Token embedding scaled by `√d_model` plus the first `ids.len()` rows of
/// a precomputed positional table.
pub fn embed(
    g: &mut Graph,
    store: &ParamStore,
    table: &str,
    ids: &[usize],
    positions: &Tensor,
) -> Result<Var, NnError> {
    let t = g.param(store, table)?;
    let e = g.embedding(t, ids)?;
    let d = g.value(e).cols();
    if ids.len() > positions.rows() || positions.cols() != d {
        return Err(NnError::ShapeMismatch {
            op: "embed",
            left: vec![ids.len(), d],
            right: positions.shape().to_vec(),
        });
    }
    let e = g.scale(e, (d as f64).sqrt());
    let pe = Tensor::new(vec![ids.len(), d], positions.data()[..ids.len() * d].to_vec())?;
    let pe = g.input(pe);
    g.add(e, pe)
}
