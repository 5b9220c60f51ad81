//! Random spacetime masking.
//!
//! Sampling draws one counter-based uniform per token (SplitMix64 keyed by the
//! seed), argsorts them with index tie-break, and keeps the first
//! `max(1, round(N·(1−ratio)))` tokens. Plans are bit-reproducible from
//! `(n_tokens, ratio, seed)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::rng::CounterRng;

/// Number of visible tokens for a ratio; never below one.
pub fn keep_count(n_tokens: usize, ratio: f64) -> usize {
    ((n_tokens as f64 * (1.0 - ratio)).round() as usize).clamp(1, n_tokens.max(1))
}

/// Replayable description of a plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub n_tokens: usize,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub ratio: f64,
    pub seed: u64,
    /// Ascending.
    pub visible_idx: Vec<usize>,
    /// Ascending.
    pub masked_idx: Vec<usize>,
    /// `restore[i]` is the position of token `i` in `visible ‖ masked`.
    pub restore: Vec<usize>,
}

impl MaskPlan {
    pub fn spec(&self) -> MaskSpec {
        MaskSpec {
            n_tokens: self.n_tokens,
            ratio: self.ratio,
            seed: self.seed,
        }
    }

    pub fn from_spec(spec: MaskSpec) -> Result<Self> {
        sample_mask(spec.n_tokens, spec.ratio, spec.seed)
    }

    pub fn n_visible(&self) -> usize {
        self.visible_idx.len()
    }

    /// Plan that keeps every token.
    pub fn full(n_tokens: usize) -> Self {
        Self::from_parts(n_tokens, 0.0, 0, (0..n_tokens).collect(), Vec::new())
    }

    fn from_parts(
        n_tokens: usize,
        ratio: f64,
        seed: u64,
        visible_idx: Vec<usize>,
        masked_idx: Vec<usize>,
    ) -> Self {
        let mut restore = vec![0; n_tokens];
        for (pos, &i) in visible_idx.iter().chain(masked_idx.iter()).enumerate() {
            restore[i] = pos;
        }
        Self {
            n_tokens,
            ratio,
            seed,
            visible_idx,
            masked_idx,
            restore,
        }
    }

    /// Per-token flag, true where masked.
    pub fn masked_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_tokens];
        for &i in &self.masked_idx {
            flags[i] = true;
        }
        flags
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.spec()).expect("mask spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MaskSpec =
            serde_json::from_str(text).map_err(|e| Error::format("mask plan", e))?;
        Self::from_spec(spec)
    }
}

pub fn sample_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidRatio(ratio));
    }
    if n_tokens == 0 {
        return Err(Error::ShapeMismatch("mask over zero tokens".into()));
    }
    let rng = CounterRng::new(seed);
    let noise: Vec<f64> = (0..n_tokens as u64).map(|i| rng.f64_at(i)).collect();
    let mut order: Vec<usize> = (0..n_tokens).collect();
    order.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
    let keep = keep_count(n_tokens, ratio);
    let mut visible = order[..keep].to_vec();
    let mut masked = order[keep..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan::from_parts(n_tokens, ratio, seed, visible, masked))
}

fn check_rows(rows: usize, expected: usize, what: &str) -> Result<()> {
    if rows != expected {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {rows} rows, plan expects {expected}"
        )));
    }
    Ok(())
}

pub fn gather_visible(tokens: &Matrix, plan: &MaskPlan) -> Result<Matrix> {
    check_rows(tokens.nrows(), plan.n_tokens, "gather")?;
    Ok(tokens.select(ndarray::Axis(0), &plan.visible_idx))
}

pub fn scatter_with_mask_tokens(
    visible: &Matrix,
    plan: &MaskPlan,
    mask_token: &[f64],
) -> Result<Matrix> {
    check_rows(visible.nrows(), plan.n_visible(), "scatter")?;
    if mask_token.len() != visible.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "mask token width {} vs {}",
            mask_token.len(),
            visible.ncols()
        )));
    }
    let mut out = Matrix::zeros((plan.n_tokens, visible.ncols()));
    for (r, &i) in plan.visible_idx.iter().enumerate() {
        out.row_mut(i).assign(&visible.row(r));
    }
    let token = ndarray::ArrayView1::from(mask_token);
    for &i in &plan.masked_idx {
        out.row_mut(i).assign(&token);
    }
    Ok(out)
}

/// In-graph scatter: `visible` (V×D) and a learned `mask_token` (1×D) into N×D.
pub fn scatter_in_graph(g: &mut Graph<'_>, visible: Var, mask_token: Var, plan: &MaskPlan) -> Var {
    if plan.masked_idx.is_empty() {
        return visible;
    }
    let masked = g.repeat_rows(mask_token, plan.masked_idx.len());
    let joined = g.concat_rows(&[visible, masked]);
    g.gather_rows(joined, &plan.restore)
}
