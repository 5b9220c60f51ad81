//! Layers built on [`Graph`]: affine maps, layer norm, transformer blocks and an
//! LSTM cell.
//!
//! Token sequences from several clips are stacked row-wise into one matrix so
//! the affine layers run as single large matmuls; [`Segments`] records where
//! each clip's rows live so attention never mixes clips.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Matrix, Var};
use crate::params::{Init, ParamId, ParamStore};

/// Row ranges `(start, len)` of the sequences stacked in one matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments(pub Vec<(usize, usize)>);

impl Segments {
    pub fn uniform(count: usize, len: usize) -> Self {
        Segments((0..count).map(|i| (i * len, len)).collect())
    }

    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut start = 0;
        Segments(
            lengths
                .iter()
                .map(|&l| {
                    let s = (start, l);
                    start += l;
                    s
                })
                .collect(),
        )
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|s| s.1).sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Train/eval switch plus the randomness stochastic layers consume.
pub struct Mode<'r> {
    pub train: bool,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> Mode<'r> {
    pub fn eval() -> Self {
        Mode {
            train: false,
            rng: None,
        }
    }

    pub fn train(rng: &'r mut ChaCha8Rng) -> Self {
        Mode {
            train: true,
            rng: Some(rng),
        }
    }

    fn active(&mut self, rate: f64) -> Option<&mut ChaCha8Rng> {
        if self.train && rate > 0.0 {
            self.rng.as_deref_mut()
        } else {
            None
        }
    }
}

/// Parameter access that optionally blocks gradient flow.
pub fn param(g: &mut Graph<'_>, id: ParamId, frozen: bool) -> Var {
    if frozen {
        g.frozen_param(id)
    } else {
        g.param(id)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(in_dim, out_dim));
        let bias = bias.then(|| store.add(format!("{name}.bias"), init.zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, frozen: bool) -> Var {
        let w = param(g, self.weight, frozen);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = param(g, b, frozen);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), init.ones(1, dim));
        let beta = store.add(format!("{name}.beta"), init.zeros(1, dim));
        Self {
            gamma,
            beta,
            eps: 1e-6,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, frozen: bool) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gamma = param(g, self.gamma, frozen);
        let beta = param(g, self.beta, frozen);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

fn dropout(g: &mut Graph<'_>, x: Var, rate: f64, mode: &mut Mode<'_>) -> Var {
    let Some(rng) = mode.active(rate) else {
        return x;
    };
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x);
    let mask = Matrix::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    });
    g.mul_const(x, mask)
}

/// Stochastic depth: scales each segment's residual branch by 0 or `1/(1-p)`.
fn drop_path(g: &mut Graph<'_>, x: Var, rate: f64, segs: &Segments, mode: &mut Mode<'_>) -> Var {
    let Some(rng) = mode.active(rate) else {
        return x;
    };
    let keep = 1.0 / (1.0 - rate);
    let mut weights = Vec::with_capacity(segs.total());
    for &(_, len) in &segs.0 {
        let w = if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        };
        weights.extend(std::iter::repeat_n(w, len));
    }
    g.mul_rows_const(x, weights)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        Self {
            fc1: Linear::new(store, init, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), hidden, dim, true),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        dropout_rate: f64,
        mode: &mut Mode<'_>,
        frozen: bool,
    ) -> Var {
        let h = self.fc1.forward(g, x, frozen);
        let h = g.gelu(h);
        let h = dropout(g, h, dropout_rate, mode);
        let y = self.fc2.forward(g, h, frozen);
        dropout(g, y, dropout_rate, mode)
    }
}

/// Multi-head self-attention, joint over every row of a segment.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim must divide into heads"
        );
        Self {
            qkv: Linear::new(store, init, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, init, &format!("{name}.proj"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, segs: &Segments, frozen: bool) -> Var {
        let qkv = self.qkv.forward(g, x, frozen);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(segs.len());
        for &(start, len) in &segs.0 {
            let rows = if segs.len() == 1 {
                qkv
            } else {
                g.slice_rows(qkv, start, len)
            };
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = g.slice_cols(rows, h * dh, dh);
                let k = g.slice_cols(rows, self.dim + h * dh, dh);
                let v = g.slice_cols(rows, 2 * self.dim + h * dh, dh);
                let scores = g.matmul_t(q, k);
                let scores = g.scale(scores, scale);
                let attn = g.softmax(scores);
                heads.push(g.matmul(attn, v));
            }
            outs.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            });
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_rows(&outs)
        };
        self.proj.forward(g, merged, frozen)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub drop_path: f64,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        drop_path: f64,
    ) -> Self {
        let hidden = ((dim as f64) * mlp_ratio).round() as usize;
        Self {
            norm1: LayerNorm::new(store, init, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, init, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, init, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, hidden),
            drop_path,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        segs: &Segments,
        dropout_rate: f64,
        mode: &mut Mode<'_>,
        frozen: bool,
    ) -> Var {
        let h = self.norm1.forward(g, x, frozen);
        let h = self.attn.forward(g, h, segs, frozen);
        let h = drop_path(g, h, self.drop_path, segs, mode);
        let x = g.add(x, h);
        let h = self.norm2.forward(g, x, frozen);
        let h = self.mlp.forward(g, h, dropout_rate, mode, frozen);
        let h = drop_path(g, h, self.drop_path, segs, mode);
        g.add(x, h)
    }
}

/// Single-layer LSTM cell operating on one row at a time.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let input = store.add(format!("{name}.w_input"), init.xavier(in_dim, 4 * hidden));
        let recurrent = store.add(
            format!("{name}.w_recurrent"),
            init.xavier(hidden, 4 * hidden),
        );
        // Gate order i, f, g, o; forget gate starts open.
        let mut b = init.zeros(1, 4 * hidden);
        b.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            input,
            recurrent,
            bias,
            hidden,
        }
    }

    /// Returns `(h, c)` for the next step.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let wi = g.param(self.input);
        let wh = g.param(self.recurrent);
        let b = g.param(self.bias);
        let zx = g.matmul(x, wi);
        let zh = g.matmul(h, wh);
        let z = g.add(zx, zh);
        let z = g.add_row(z, b);
        let n = self.hidden;
        let i = g.slice_cols(z, 0, n);
        let f = g.slice_cols(z, n, n);
        let cand = g.slice_cols(z, 2 * n, n);
        let o = g.slice_cols(z, 3 * n, n);
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let cand = g.tanh(cand);
        let o = g.sigmoid(o);
        let keep = g.mul(f, c);
        let write = g.mul(i, cand);
        let c_next = g.add(keep, write);
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed);
        (h_next, c_next)
    }
}
