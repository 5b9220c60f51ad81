//! Memory-augmented few-shot learner over clip embeddings.
//!
//! Per step the LSTM controller reads `embedding ⊕ one_hot(previous label) ⊕
//! previous reads`, emits read keys, write keys, a write gate and a key
//! strength per head, writes with the least-recently-used rule, then reads
//! by cosine content addressing. Usage is a detached statistic: it only
//! selects the least-used slot, so no gradient flows through it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::episodes::label_onehot;
use crate::error::{Error, Result};
use crate::nn::{Linear, LstmCell};
use crate::params::{Init, ParamStore};
use crate::rng::seeded;

pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    Frozen,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MANNConfig {
    pub memory_slots: usize,
    pub key_dim: usize,
    pub n_reads: usize,
    pub controller_hidden: usize,
    pub usage_decay: f64,
    pub backbone_mode: BackboneMode,
    /// Width of the label channel and of the logits.
    pub n_way: usize,
}

impl Default for MANNConfig {
    fn default() -> Self {
        Self {
            memory_slots: 128,
            key_dim: 40,
            n_reads: 4,
            controller_hidden: 200,
            usage_decay: 0.95,
            backbone_mode: BackboneMode::Frozen,
            n_way: 5,
        }
    }
}

impl MANNConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_reads < 1 || self.memory_slots < self.n_reads {
            return Err(Error::InvalidConfig(
                "need memory_slots ≥ n_reads ≥ 1".into(),
            ));
        }
        if self.key_dim == 0 || self.controller_hidden == 0 || self.n_way < 2 {
            return Err(Error::InvalidConfig(
                "key_dim, controller_hidden must be positive and n_way ≥ 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.usage_decay) {
            return Err(Error::InvalidConfig(format!(
                "usage decay {} outside [0, 1)",
                self.usage_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryState {
    pub memory: Matrix,
    pub read_weights: Matrix,
    pub write_weights: Matrix,
    /// `1×slots`.
    pub usage: Matrix,
    pub last_reads: Matrix,
}

pub fn init_memory(cfg: &MANNConfig) -> MemoryState {
    let (s, r, k) = (cfg.memory_slots, cfg.n_reads, cfg.key_dim);
    MemoryState {
        memory: Matrix::from_elem((s, k), 1e-6),
        read_weights: Matrix::from_elem((r, s), 1.0 / s as f64),
        write_weights: Matrix::from_elem((r, s), 1.0 / s as f64),
        usage: Matrix::zeros((1, s)),
        last_reads: Matrix::zeros((r, k)),
    }
}

/// Indices of the `n` least-used slots, least used first (ties by index).
pub fn least_used(usage: &Matrix, n: usize) -> Vec<usize> {
    let u = usage.row(0);
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// Content read in a graph: returns `(weights, reads)`.
fn graph_read(g: &mut Graph<'_>, memory: Var, key: Var, strength: Option<Var>) -> (Var, Var) {
    let kn = g.l2_normalize(key, COSINE_EPS);
    let mn = g.l2_normalize(memory, COSINE_EPS);
    let mut sim = g.matmul_t(kn, mn);
    if let Some(beta) = strength {
        sim = g.mul_col(sim, beta);
    }
    let w = g.softmax(sim);
    let r = g.matmul(w, memory);
    (w, r)
}

/// LRUA write in a graph: returns `(memory, write_weights, usage)`.
///
/// Head `h` targets the `h`-th least-used slot; those rows are cleared first.
/// Usage is updated as `γ·usage + Σ read_prev + Σ write`.
fn graph_write(
    g: &mut Graph<'_>,
    memory: Var,
    read_prev: Var,
    usage: &Matrix,
    key: Var,
    alpha: Var,
    decay: f64,
) -> (Var, Var, Matrix) {
    let (slots, key_dim) = g.shape(memory);
    let heads = g.shape(key).0;
    let lu = least_used(usage, heads);
    let mut onehot = Matrix::zeros((heads, slots));
    let mut clear = Matrix::ones((slots, key_dim));
    for (h, &slot) in lu.iter().enumerate() {
        onehot[[h, slot]] = 1.0;
        clear.row_mut(slot).fill(0.0);
    }
    let blend_prev = g.mul_col(read_prev, alpha);
    let neg = g.scale(alpha, -1.0);
    let rest = g.add_scalar(neg, 1.0);
    let lu_var = g.constant(onehot);
    let blend_lu = g.mul_col(lu_var, rest);
    let w = g.add(blend_prev, blend_lu);
    let cleared = g.mul_const(memory, clear);
    let delta = g.t_matmul(w, key);
    let memory = g.add(cleared, delta);
    let new_usage = usage.mapv(|u| decay * u)
        + g.value(read_prev)
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0))
        + g.value(w)
            .sum_axis(ndarray::Axis(0))
            .insert_axis(ndarray::Axis(0));
    (memory, w, new_usage)
}

fn check_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Reads with unit key strength and updates `read_weights` and `last_reads`.
pub fn read_memory(state: &mut MemoryState, key: &Matrix) -> Result<Matrix> {
    if !check_finite(key) {
        return Err(Error::NonFiniteKey);
    }
    if key.dim() != state.last_reads.dim() {
        return Err(Error::ShapeMismatch(format!(
            "key {:?}, expected {:?}",
            key.dim(),
            state.last_reads.dim()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let m = g.constant(state.memory.clone());
    let k = g.constant(key.clone());
    let (w, r) = graph_read(&mut g, m, k, None);
    state.read_weights = g.value(w).clone();
    state.last_reads = g.value(r).clone();
    Ok(state.last_reads.clone())
}

/// LRUA write with per-head gate `alpha ∈ [0, 1]`.
pub fn write_memory(
    state: &mut MemoryState,
    write_key: &Matrix,
    alpha: &[f64],
    decay: f64,
) -> Result<()> {
    if !check_finite(write_key) {
        return Err(Error::NonFiniteKey);
    }
    if write_key.dim() != state.last_reads.dim() || alpha.len() != write_key.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "write key {:?} with {} gates",
            write_key.dim(),
            alpha.len()
        )));
    }
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let m = g.constant(state.memory.clone());
    let rp = g.constant(state.read_weights.clone());
    let k = g.constant(write_key.clone());
    let a = g.constant(Matrix::from_shape_vec((alpha.len(), 1), alpha.to_vec()).expect("column"));
    let (m, w, usage) = graph_write(&mut g, m, rp, &state.usage, k, a, decay);
    state.memory = g.value(m).clone();
    state.write_weights = g.value(w).clone();
    state.usage = usage;
    Ok(())
}

/// Memory and controller state inside a graph.
#[derive(Clone, Debug)]
pub struct StepState {
    pub h: Var,
    pub c: Var,
    pub memory: Var,
    pub read_weights: Var,
    pub write_weights: Var,
    pub usage: Matrix,
    pub last_reads: Var,
}

impl StepState {
    pub fn memory_state(&self, g: &Graph<'_>) -> MemoryState {
        MemoryState {
            memory: g.value(self.memory).clone(),
            read_weights: g.value(self.read_weights).clone(),
            write_weights: g.value(self.write_weights).clone(),
            usage: self.usage.clone(),
            last_reads: g.value(self.last_reads).clone(),
        }
    }
}

/// Controller and heads; parameters live under `mann.` in the shared store.
#[derive(Clone, Debug)]
pub struct MannNet {
    pub cfg: MANNConfig,
    pub input_dim: usize,
    controller: LstmCell,
    read_key: Linear,
    write_key: Linear,
    gate: Linear,
    strength: Linear,
    out: Linear,
}

/// Per-step outputs of one unrolled episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    /// `steps × n_way`.
    pub logits: Var,
    /// Mean cross-entropy over all steps.
    pub loss: Var,
    pub states: Vec<MemoryState>,
}

impl MannNet {
    pub fn new(
        store: &mut ParamStore,
        cfg: MANNConfig,
        input_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let mut init = Init { rng: &mut rng };
        let rk = cfg.n_reads * cfg.key_dim;
        let ctrl_in = input_dim + cfg.n_way + 1 + rk;
        let hidden = cfg.controller_hidden;
        Ok(Self {
            cfg,
            input_dim,
            controller: LstmCell::new(store, &mut init, "mann.controller", ctrl_in, hidden),
            read_key: Linear::new(store, &mut init, "mann.read_key", hidden, rk, true),
            write_key: Linear::new(store, &mut init, "mann.write_key", hidden, rk, true),
            gate: Linear::new(store, &mut init, "mann.gate", hidden, cfg.n_reads, true),
            strength: Linear::new(store, &mut init, "mann.strength", hidden, cfg.n_reads, true),
            out: Linear::new(store, &mut init, "mann.out", hidden + rk, cfg.n_way, true),
        })
    }

    pub fn initial_state(&self, g: &mut Graph<'_>) -> StepState {
        let mem = init_memory(&self.cfg);
        StepState {
            h: g.constant(Matrix::zeros((1, self.cfg.controller_hidden))),
            c: g.constant(Matrix::zeros((1, self.cfg.controller_hidden))),
            memory: g.constant(mem.memory),
            read_weights: g.constant(mem.read_weights),
            write_weights: g.constant(mem.write_weights),
            usage: mem.usage,
            last_reads: g.constant(mem.last_reads),
        }
    }

    /// One step: `x` is a `1×input_dim` embedding, `prev_label` the offset label.
    pub fn step(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        prev_label: Option<usize>,
        state: &StepState,
    ) -> Result<(Var, StepState)> {
        let cfg = &self.cfg;
        let (r, k) = (cfg.n_reads, cfg.key_dim);
        if g.shape(x) != (1, self.input_dim) {
            return Err(Error::ShapeMismatch(format!(
                "step input {:?}, expected (1, {})",
                g.shape(x),
                self.input_dim
            )));
        }
        let label = g.constant(
            Matrix::from_shape_vec((1, cfg.n_way + 1), label_onehot(prev_label, cfg.n_way))
                .expect("row"),
        );
        let reads_flat = g.reshape(state.last_reads, 1, r * k);
        let input = g.concat_cols(&[x, label, reads_flat]);
        let (h, c) = self.controller.forward(g, input, state.h, state.c);
        if !check_finite(g.value(h)) || !check_finite(g.value(c)) {
            return Err(Error::NonFiniteState);
        }
        let rk = self.read_key.forward(g, h, false);
        let rk = g.tanh(rk);
        let rk = g.reshape(rk, r, k);
        let wk = self.write_key.forward(g, h, false);
        let wk = g.tanh(wk);
        let wk = g.reshape(wk, r, k);
        let gate = self.gate.forward(g, h, false);
        let gate = g.sigmoid(gate);
        let alpha = g.reshape(gate, r, 1);
        let beta = self.strength.forward(g, h, false);
        let beta = g.sigmoid(beta);
        let beta = g.scale(beta, 9.0);
        let beta = g.add_scalar(beta, 1.0);
        let beta = g.reshape(beta, r, 1);
        let (memory, write_w, usage) = graph_write(
            g,
            state.memory,
            state.read_weights,
            &state.usage,
            wk,
            alpha,
            cfg.usage_decay,
        );
        let (read_w, reads) = graph_read(g, memory, rk, Some(beta));
        let reads_flat = g.reshape(reads, 1, r * k);
        let features = g.concat_cols(&[h, reads_flat]);
        let logits = self.out.forward(g, features, false);
        if !check_finite(g.value(logits)) {
            return Err(Error::NonFiniteState);
        }
        let next = StepState {
            h,
            c,
            memory,
            read_weights: read_w,
            write_weights: write_w,
            usage,
            last_reads: reads,
        };
        Ok((logits, next))
    }

    /// Unrolls one episode from a fresh state. `embeddings` is `steps×input_dim`
    /// in sequence order; `targets` are the true labels.
    pub fn episode_forward(
        &self,
        g: &mut Graph<'_>,
        embeddings: Var,
        targets: &[usize],
        keep_states: bool,
    ) -> Result<EpisodeOutput> {
        let steps = targets.len();
        if steps == 0 {
            return Err(Error::EmptyEpisode);
        }
        if g.shape(embeddings).0 != steps {
            return Err(Error::ShapeMismatch(format!(
                "{} embeddings for {steps} targets",
                g.shape(embeddings).0
            )));
        }
        let mut state = self.initial_state(g);
        let mut logits = Vec::with_capacity(steps);
        let mut states = Vec::new();
        for t in 0..steps {
            let x = g.slice_rows(embeddings, t, 1);
            let prev = t.checked_sub(1).map(|p| targets[p]);
            let (l, next) = self.step(g, x, prev, &state)?;
            logits.push(l);
            state = next;
            if keep_states {
                states.push(state.memory_state(g));
            }
        }
        let logits = g.concat_rows(&logits);
        let mut onehot = Matrix::zeros((steps, self.cfg.n_way));
        for (t, &y) in targets.iter().enumerate() {
            if y >= self.cfg.n_way {
                return Err(Error::ShapeMismatch(format!(
                    "label {y} outside {}-way head",
                    self.cfg.n_way
                )));
            }
            onehot[[t, y]] = 1.0;
        }
        let loss = g.soft_cross_entropy(logits, onehot);
        Ok(EpisodeOutput {
            logits,
            loss,
            states,
        })
    }
}

/// Row-wise argmax with ties to the lower index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > r[best] { i } else { best })
        })
        .collect()
}
