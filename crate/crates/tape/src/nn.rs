//! Standard layers built on [`Graph`] ops. Each layer registers its weights in
//! a [`ParamStore`] under a dotted name prefix and keeps only the ids.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Graph, Matrix, ParamId, ParamStore, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Xavier/Glorot uniform initialization.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Upper-triangular `-inf` mask so row `i` attends only to columns `<= i`.
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        let bias = Some(store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub count: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, count: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            table: store.add(format!("{name}.table"), normal(count, dim, std, rng)),
            count,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        let t = g.param(store, self.table);
        g.gather_rows(t, ids)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// Scaled dot-product attention of `queries` over `context`, with an
    /// optional additive `queries x context` mask.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        context: Var,
        mask: Option<&Matrix>,
    ) -> Var {
        let q = self.query.forward(g, store, queries);
        let k = self.key.forward(g, store, context);
        let v = self.value.forward(g, store, context);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * head_dim, head_dim),
                    g.slice_cols(k, h * head_dim, head_dim),
                    g.slice_cols(v, h * head_dim, head_dim),
                )
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let scores = match mask {
                Some(m) => g.add_const(scores, m),
                None => scores,
            };
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.output.forward(g, store, merged)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.relu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer encoder block: self-attention then feed-forward,
/// each wrapped as `x + f(norm(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mask: Option<&Matrix>) -> Var {
        let n = self.norm_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, n, n, mask);
        let x = g.add(x, a);
        let n = self.norm_ff.forward(g, store, x);
        let f = self.ff.forward(g, store, n);
        g.add(x, f)
    }
}

/// Post-norm transformer decoder block: masked self-attention, conditional
/// (cross) attention over a context sequence, and a two-layer feed-forward,
/// each followed by a residual add and its own layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ff: FeedForward,
    pub norm_ff: LayerNorm,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm_cross: LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, hidden, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, context: Var, self_mask: Option<&Matrix>) -> Var {
        let a = self.self_attn.forward(g, store, x, x, self_mask);
        let x = g.add(x, a);
        let x = self.norm_self.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, x, context, None);
        let x = g.add(x, c);
        let x = self.norm_cross.forward(g, store, x);
        let f = self.ff.forward(g, store, x);
        let x = g.add(x, f);
        self.norm_ff.forward(g, store, x)
    }
}
