use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tokenizer::{Grid, PatchConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconMode {
    MseMasked,
    BceAllPixels,
}

/// How raw decoder output becomes a probability for the BCE metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    Logistic,
    Clamp,
}

pub fn squash(raw: &Matrix, how: Squash) -> Matrix {
    match how {
        Squash::Logistic => raw.mapv(crate::autodiff::sigmoid),
        Squash::Clamp => raw.mapv(|v| v.clamp(0.0, 1.0)),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconLoss {
    pub mean: f64,
    /// One value per frame of the unpatchified clip.
    pub per_frame: Vec<f64>,
}

/// Binary cross-entropy of one pixel with `0·ln 0 = 0`.
pub fn bce(p: f64, t: f64) -> f64 {
    const FLOOR: f64 = 1e-12;
    let mut loss = 0.0;
    if t > 0.0 {
        loss -= t * p.max(FLOOR).ln();
    }
    if t < 1.0 {
        loss -= (1.0 - t) * (1.0 - p).max(FLOOR).ln();
    }
    loss
}

/// Sums of patch-matrix entries grouped by the frame they belong to.
fn frame_sums(m: &Matrix, grid: Grid, patch: &PatchConfig) -> Result<Vec<f64>> {
    let per_frame = m.ncols() / patch.tubelet_size.max(1);
    if m.nrows() != grid.len() || per_frame * patch.tubelet_size != m.ncols() || per_frame == 0 {
        return Err(Error::ShapeMismatch(format!(
            "patch matrix {:?} on grid {grid:?}",
            m.dim()
        )));
    }
    let mut sums = vec![0.0; grid.t * patch.tubelet_size];
    for (i, row) in m.rows().into_iter().enumerate() {
        let (t, _) = grid.coords(i);
        for (k, v) in row.iter().enumerate() {
            sums[t * patch.tubelet_size + k / per_frame] += v;
        }
    }
    Ok(sums)
}

/// Reconstruction loss of one clip.
///
/// `mse_masked` averages squared error over masked patches only (over every
/// patch when the plan masks nothing). `bce_all_pixels` expects `pred` already
/// squashed into `[0, 1]` and averages over every pixel. Both return the
/// per-frame vector of the same statistic.
pub fn reconstruction_loss(
    pred: &Matrix,
    target: &Matrix,
    plan: &MaskPlan,
    mode: ReconMode,
    grid: Grid,
    patch: &PatchConfig,
) -> Result<ReconLoss> {
    if pred.dim() != target.dim() || pred.nrows() != plan.n_tokens {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, target {:?}, plan over {} tokens",
            pred.dim(),
            target.dim(),
            plan.n_tokens
        )));
    }
    match mode {
        ReconMode::MseMasked => {
            let flags = plan.masked_flags();
            let all = plan.masked_idx.is_empty();
            let mut err = pred - target;
            err.mapv_inplace(|v| v * v);
            let mut weight = Matrix::zeros(err.dim());
            for (r, &m) in flags.iter().enumerate() {
                if m || all {
                    weight.row_mut(r).fill(1.0);
                }
            }
            err *= &weight;
            let rows = if all {
                plan.n_tokens
            } else {
                plan.masked_idx.len()
            };
            let mean = err.sum() / (rows * pred.ncols()) as f64;
            let e = frame_sums(&err, grid, patch)?;
            let w = frame_sums(&weight, grid, patch)?;
            let per_frame = e
                .iter()
                .zip(&w)
                .map(|(e, w)| if *w > 0.0 { e / w } else { 0.0 })
                .collect();
            Ok(ReconLoss { mean, per_frame })
        }
        ReconMode::BceAllPixels => {
            if let Some(&v) = target
                .iter()
                .chain(pred.iter())
                .find(|v| !(0.0..=1.0).contains(*v))
            {
                return Err(Error::TargetOutOfRange(v));
            }
            let cross = ndarray::Zip::from(pred)
                .and(target)
                .map_collect(|&p, &t| bce(p, t));
            let per_pixel = (grid.h
                * grid.w
                * patch.patch_size
                * patch.patch_size
                * (pred.ncols() / patch.patch_dim(1))) as f64;
            let per_frame = frame_sums(&cross, grid, patch)?
                .into_iter()
                .map(|s| s / per_pixel)
                .collect();
            let mean = cross.sum() / cross.len() as f64;
            Ok(ReconLoss { mean, per_frame })
        }
    }
}

/// Masked-MSE objective for a stack of clips.
#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    /// Mean over clips.
    pub normalized: Var,
    /// `normalized × batch_size`.
    pub unnormalized: Var,
}

/// In-graph masked MSE. `pred` and `targets` stack `plans.len()` clips of
/// `N` rows each.
pub fn mse_masked_graph(
    g: &mut Graph<'_>,
    pred: Var,
    targets: Matrix,
    plans: &[&MaskPlan],
) -> Result<BatchLoss> {
    let (rows, cols) = g.shape(pred);
    let n: usize = plans.iter().map(|p| p.n_tokens).sum();
    if targets.dim() != (rows, cols) || n != rows || plans.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "pred {:?}, targets {:?}, {n} planned rows",
            (rows, cols),
            targets.dim()
        )));
    }
    let mut weights = Vec::with_capacity(rows);
    for plan in plans {
        let all = plan.masked_idx.is_empty();
        let count = if all {
            plan.n_tokens
        } else {
            plan.masked_idx.len()
        };
        let w = 1.0 / (count * cols) as f64;
        weights.extend(
            plan.masked_flags()
                .into_iter()
                .map(|m| if m || all { w } else { 0.0 }),
        );
    }
    let t = g.constant(targets);
    let diff = g.sub(pred, t);
    let sq = g.mul(diff, diff);
    let weighted = g.mul_rows_const(sq, weights);
    let sum = g.sum_all(weighted);
    let b = plans.len() as f64;
    let normalized = g.scale(sum, 1.0 / b);
    let unnormalized = g.scale(normalized, b);
    Ok(BatchLoss {
        normalized,
        unnormalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_mask;
    use crate::params::ParamStore;
    use crate::rng::seeded;
    use rand::Rng;

    fn setup() -> (Grid, PatchConfig) {
        (Grid { t: 2, h: 2, w: 2 }, PatchConfig::new(2, 1, 4, false))
    }

    #[test]
    fn perfect_binary_reconstruction_is_zero() {
        let (grid, patch) = setup();
        let mut rng = seeded(1);
        let t = Matrix::from_shape_fn((8, 12), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let plan = sample_mask(8, 0.5, 0).unwrap();
        let bce =
            reconstruction_loss(&t, &t, &plan, ReconMode::BceAllPixels, grid, &patch).unwrap();
        assert_eq!(bce.mean, 0.0);
        assert!(bce.per_frame.iter().all(|&v| v == 0.0));
        let mse = reconstruction_loss(&t, &t, &plan, ReconMode::MseMasked, grid, &patch).unwrap();
        assert_eq!(mse.mean, 0.0);
    }

    #[test]
    fn half_prediction_gives_ln2() {
        let (grid, patch) = setup();
        let mut rng = seeded(2);
        let t = Matrix::from_shape_fn((8, 12), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let p = Matrix::from_elem((8, 12), 0.5);
        let plan = sample_mask(8, 0.5, 0).unwrap();
        let r = reconstruction_loss(&p, &t, &plan, ReconMode::BceAllPixels, grid, &patch).unwrap();
        assert!((r.mean - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.per_frame.len(), 2);
        assert!(r
            .per_frame
            .iter()
            .all(|v| (v - std::f64::consts::LN_2).abs() < 1e-6));
    }

    #[test]
    fn bce_rejects_out_of_range_targets() {
        let (grid, patch) = setup();
        let t = Matrix::from_elem((8, 12), 1.5);
        let plan = sample_mask(8, 0.5, 0).unwrap();
        assert!(matches!(
            reconstruction_loss(
                &t.mapv(|_| 0.5),
                &t,
                &plan,
                ReconMode::BceAllPixels,
                grid,
                &patch
            ),
            Err(Error::TargetOutOfRange(_))
        ));
    }

    #[test]
    fn mse_ignores_visible_predictions() {
        let (grid, patch) = setup();
        let mut rng = seeded(3);
        let t = Matrix::from_shape_fn((8, 12), |_| rng.random::<f64>());
        let p = Matrix::from_shape_fn((8, 12), |_| rng.random::<f64>());
        let plan = sample_mask(8, 0.5, 4).unwrap();
        let base = reconstruction_loss(&p, &t, &plan, ReconMode::MseMasked, grid, &patch).unwrap();
        let mut q = p.clone();
        for &i in &plan.visible_idx {
            q.row_mut(i).fill(100.0);
        }
        let moved = reconstruction_loss(&q, &t, &plan, ReconMode::MseMasked, grid, &patch).unwrap();
        assert_eq!(base, moved);
    }

    #[test]
    fn graph_loss_matches_value_loss_and_normalization() {
        let (grid, patch) = setup();
        let mut rng = seeded(5);
        let plans: Vec<_> = (0..3).map(|s| sample_mask(8, 0.5, s).unwrap()).collect();
        let t = Matrix::from_shape_fn((24, 12), |_| rng.random::<f64>());
        let p = Matrix::from_shape_fn((24, 12), |_| rng.random::<f64>());
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let pv = g.constant(p.clone());
        let refs: Vec<&MaskPlan> = plans.iter().collect();
        let loss = mse_masked_graph(&mut g, pv, t.clone(), &refs).unwrap();
        let mut expected = 0.0;
        for (b, plan) in plans.iter().enumerate() {
            let rows = ndarray::s![b * 8..(b + 1) * 8, ..];
            let r = reconstruction_loss(
                &p.slice(rows).to_owned(),
                &t.slice(rows).to_owned(),
                plan,
                ReconMode::MseMasked,
                grid,
                &patch,
            )
            .unwrap();
            expected += r.mean;
        }
        let normalized = g.scalar(loss.normalized);
        assert!((normalized - expected / 3.0).abs() < 1e-12);
        assert_eq!(normalized * 3.0, g.scalar(loss.unnormalized));
    }
}
