//! Spacetime patch tokenization.
//!
//! A clip of shape `T×H×W×C` is cut into tubelets of `tubelet_size` frames by
//! `patch_size²` pixels. Row `i` of the patch matrix is the flattened tubelet
//! at grid cell `i` in row-major `(t, h, w)` order; inside a row, pixels are
//! ordered `(dt, dy, dx, c)`.
//!
//! Shifted patch tokenization concatenates four diagonally shifted copies of
//! every frame to the channels (`5C` channels total) before cutting patches,
//! then layer-normalizes and projects each row.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, Var};
use crate::dataset::ClipTensor;
use crate::error::{Error, Result};
use crate::nn::{param, LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub tubelet_size: usize,
    pub embed_dim: usize,
    pub use_spt: bool,
    /// Diagonal shift in pixels; half a patch unless overridden.
    pub spt_shift: usize,
}

impl PatchConfig {
    pub fn new(patch_size: usize, tubelet_size: usize, embed_dim: usize, use_spt: bool) -> Self {
        Self {
            patch_size,
            tubelet_size,
            embed_dim,
            use_spt,
            spt_shift: patch_size / 2,
        }
    }

    /// Raw pixels per tubelet for `channels` input channels.
    pub fn patch_dim(&self, channels: usize) -> usize {
        self.tubelet_size * self.patch_size * self.patch_size * channels
    }

    /// Width of the rows fed to the projection.
    pub fn projection_input_dim(&self, channels: usize) -> usize {
        self.patch_dim(if self.use_spt { 5 * channels } else { channels })
    }

    pub fn grid_for(&self, t: usize, h: usize, w: usize) -> Result<Grid> {
        let check = |dim: &'static str, size: usize, by: usize| {
            if by == 0 || !size.is_multiple_of(by) || size == 0 {
                Err(Error::IndivisibleDimensions { dim, size, by })
            } else {
                Ok(size / by)
            }
        };
        Ok(Grid {
            t: check("T", t, self.tubelet_size)?,
            h: check("H", h, self.patch_size)?,
            w: check("W", w, self.patch_size)?,
        })
    }
}

/// Token grid geometry in cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(t, spatial)` coordinates of token `i`, `spatial = h·W + w`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / (self.h * self.w), i % (self.h * self.w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Matrix,
    pub grid: Grid,
}

/// Cuts a clip into tubelet rows.
pub fn patchify(clip: &ClipTensor, cfg: &PatchConfig) -> Result<(Matrix, Grid)> {
    let (t, h, w, c) = clip.dims();
    let grid = cfg.grid_for(t, h, w)?;
    let (p, tu) = (cfg.patch_size, cfg.tubelet_size);
    let width = cfg.patch_dim(c);
    let mut out = Matrix::zeros((grid.len(), width));
    let frames = &clip.frames;
    for gt in 0..grid.t {
        for gh in 0..grid.h {
            for gw in 0..grid.w {
                let row_idx = (gt * grid.h + gh) * grid.w + gw;
                let mut row = out.row_mut(row_idx);
                let mut k = 0;
                for dt in 0..tu {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                row[k] =
                                    frames[[gt * tu + dt, gh * p + dy, gw * p + dx, ch]] as f64;
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, grid))
}

/// Exact inverse of [`patchify`]. The channel count follows from the row width.
pub fn unpatchify(patches: &Matrix, grid: Grid, cfg: &PatchConfig) -> Result<ClipTensor> {
    let (n, width) = patches.dim();
    if n != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} rows for a grid of {} cells",
            grid.len()
        )));
    }
    let per_channel = cfg.patch_dim(1);
    if per_channel == 0 || width % per_channel != 0 || width == 0 {
        return Err(Error::ShapeMismatch(format!(
            "row width {width} is not a multiple of {per_channel}"
        )));
    }
    let c = width / per_channel;
    let (p, tu) = (cfg.patch_size, cfg.tubelet_size);
    let mut frames = Array4::<f32>::zeros((grid.t * tu, grid.h * p, grid.w * p, c));
    for gt in 0..grid.t {
        for gh in 0..grid.h {
            for gw in 0..grid.w {
                let row = patches.row((gt * grid.h + gh) * grid.w + gw);
                let mut k = 0;
                for dt in 0..tu {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                frames[[gt * tu + dt, gh * p + dy, gw * p + dx, ch]] =
                                    row[k] as f32;
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ClipTensor::new(frames, crate::dataset::CLIP_FPS))
}

/// Diagonal shift offsets `(dy, dx)` in channel-block order.
pub fn spt_offsets(shift: usize) -> [(isize, isize); 4] {
    let s = shift as isize;
    [(-s, -s), (-s, s), (s, -s), (s, s)]
}

/// Concatenates the clip with its four shifted copies along channels.
///
/// The copy for offset `(dy, dx)` holds `x[y - dy, x - dx]`, zero outside the
/// frame. The same shift applies to every frame.
pub fn spt_expand(clip: &ClipTensor, shift: usize) -> ClipTensor {
    let (t, h, w, c) = clip.dims();
    let offsets = spt_offsets(shift);
    let src = &clip.frames;
    let frames = Array4::from_shape_fn((t, h, w, 5 * c), |(ti, y, x, ch)| {
        let block = ch / c;
        let cc = ch % c;
        if block == 0 {
            return src[[ti, y, x, cc]];
        }
        let (dy, dx) = offsets[block - 1];
        let sy = y as isize - dy;
        let sx = x as isize - dx;
        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
            0.0
        } else {
            src[[ti, sy as usize, sx as usize, cc]]
        }
    });
    ClipTensor::new(frames, clip.fps)
}

/// Patch rows fed to the projection: plain tubelets, or tubelets of the
/// shift-expanded clip when SPT is on.
pub fn projection_rows(clip: &ClipTensor, cfg: &PatchConfig) -> Result<(Matrix, Grid)> {
    if cfg.use_spt {
        patchify(&spt_expand(clip, cfg.spt_shift), cfg)
    } else {
        patchify(clip, cfg)
    }
}

/// Learned tubelet projection (layer norm first when SPT is on).
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: PatchConfig,
    pub channels: usize,
    pub norm: Option<LayerNorm>,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        cfg: PatchConfig,
        channels: usize,
    ) -> Self {
        let in_dim = cfg.projection_input_dim(channels);
        let norm = cfg
            .use_spt
            .then(|| LayerNorm::new(store, init, &format!("{name}.norm"), in_dim));
        let proj = Linear::new(
            store,
            init,
            &format!("{name}.proj"),
            in_dim,
            cfg.embed_dim,
            true,
        );
        Self {
            cfg,
            channels,
            norm,
            proj,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, rows: Var, frozen: bool) -> Var {
        let x = match &self.norm {
            Some(norm) => norm.forward(g, rows, frozen),
            None => rows,
        };
        self.proj.forward(g, x, frozen)
    }

    /// Tokenizes a clip outside any training graph.
    pub fn tokenize(&self, store: &ParamStore, clip: &ClipTensor) -> Result<TokenGrid> {
        let (rows, grid) = projection_rows(clip, &self.cfg)?;
        let mut g = Graph::new(store);
        let x = g.constant(rows);
        let y = self.forward(&mut g, x, true);
        Ok(TokenGrid {
            tokens: g.value(y).clone(),
            grid,
        })
    }
}

/// Tokenizes with SPT; the config must have `use_spt` set.
pub fn shifted_patch_tokenize(
    embed: &PatchEmbed,
    store: &ParamStore,
    clip: &ClipTensor,
) -> Result<TokenGrid> {
    if !embed.cfg.use_spt {
        return Err(Error::InvalidConfig(
            "shifted patch tokenization requires use_spt".into(),
        ));
    }
    embed.tokenize(store, clip)
}

/// Factorized learned positions: `temporal[t] + spatial[h·W + w]`.
#[derive(Clone, Debug)]
pub struct PosEmbed {
    pub temporal: ParamId,
    pub spatial: ParamId,
    pub grid: Grid,
    pub dim: usize,
}

impl PosEmbed {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init<'_>,
        name: &str,
        grid: Grid,
        dim: usize,
    ) -> Self {
        let temporal = store.add(format!("{name}.temporal"), init.normal(grid.t, dim, 0.02));
        let spatial = store.add(
            format!("{name}.spatial"),
            init.normal(grid.h * grid.w, dim, 0.02),
        );
        Self {
            temporal,
            spatial,
            grid,
            dim,
        }
    }

    pub fn parameter_count(&self) -> usize {
        (self.grid.t + self.grid.h * self.grid.w) * self.dim
    }

    /// Position vectors for the given token indices, one row each.
    pub fn forward(&self, g: &mut Graph<'_>, token_idx: &[usize], frozen: bool) -> Var {
        let (ts, ss): (Vec<usize>, Vec<usize>) =
            token_idx.iter().map(|&i| self.grid.coords(i)).unzip();
        let temporal = param(g, self.temporal, frozen);
        let spatial = param(g, self.spatial, frozen);
        let t = g.gather_rows(temporal, &ts);
        let s = g.gather_rows(spatial, &ss);
        g.add(t, s)
    }

    pub fn table(&self, store: &ParamStore) -> Matrix {
        let idx: Vec<usize> = (0..self.grid.len()).collect();
        let mut g = Graph::new(store);
        let v = self.forward(&mut g, &idx, true);
        g.value(v).clone()
    }

    /// True when every grid cell receives a distinct vector.
    pub fn is_injective(&self, store: &ParamStore) -> bool {
        let table = self.table(store);
        let mut rows: Vec<Vec<u64>> = table
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.windows(2).all(|w| w[0] != w[1])
    }
}

/// Adds positions to every token of a grid.
pub fn add_positions(tg: &TokenGrid, pos: &PosEmbed, store: &ParamStore) -> Result<TokenGrid> {
    if tg.grid != pos.grid || tg.tokens.ncols() != pos.dim {
        return Err(Error::ShapeMismatch(format!(
            "tokens {:?} on grid {:?} vs positions {:?}×{}",
            tg.tokens.dim(),
            tg.grid,
            pos.grid,
            pos.dim
        )));
    }
    Ok(TokenGrid {
        tokens: &tg.tokens + &pos.table(store),
        grid: tg.grid,
    })
}

/// Standardizes each row to mean 0 and variance 1 (`ε = 1e-6` under the root).
pub fn patch_target_normalize(patches: &Matrix, enabled: bool) -> Matrix {
    if !enabled {
        return patches.clone();
    }
    let mut out = patches.clone();
    let d = out.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / d;
        let denom = (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mean) / denom);
    }
    out
}

/// Per-row `(mean, std)` used by [`patch_target_normalize`], for undoing it.
pub fn patch_moments(patches: &Matrix) -> Vec<(f64, f64)> {
    let d = patches.ncols() as f64;
    patches
        .rows()
        .into_iter()
        .map(|row| {
            let mean = row.sum() / d;
            let var = row.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / d;
            (mean, (var + 1e-6).sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_clip(t: usize, h: usize, w: usize, c: usize, seed: u64) -> ClipTensor {
        let mut rng = seeded(seed);
        ClipTensor::new(
            Array4::from_shape_fn((t, h, w, c), |_| rng.random::<f32>()),
            10.0,
        )
    }

    #[test]
    fn patchify_shapes() {
        let cfg = PatchConfig::new(8, 2, 128, false);
        let (m, grid) = patchify(&ClipTensor::zeros(16, 64, 64, 3), &cfg).unwrap();
        assert_eq!(m.dim(), (512, 384));
        assert_eq!(grid, Grid { t: 8, h: 8, w: 8 });
        let (m, _) = patchify(&ClipTensor::zeros(2, 8, 8, 3), &cfg).unwrap();
        assert_eq!(m.dim(), (1, 384));
    }

    #[test]
    fn indivisible_dimensions_rejected() {
        let cfg = PatchConfig::new(8, 2, 16, false);
        assert!(matches!(
            patchify(&ClipTensor::zeros(3, 8, 8, 3), &cfg),
            Err(Error::IndivisibleDimensions { dim: "T", .. })
        ));
        assert!(matches!(
            patchify(&ClipTensor::zeros(2, 8, 12, 3), &cfg),
            Err(Error::IndivisibleDimensions { dim: "W", .. })
        ));
    }

    #[test]
    fn round_trip_and_zero_case() {
        let cfg = PatchConfig::new(4, 2, 8, false);
        let clip = random_clip(4, 8, 12, 3, 1);
        let (m, grid) = patchify(&clip, &cfg).unwrap();
        assert_eq!(unpatchify(&m, grid, &cfg).unwrap().frames, clip.frames);
        let zeros = unpatchify(&Matrix::zeros(m.dim()), grid, &cfg).unwrap();
        assert!(zeros.frames.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuted_rows_restore_through_grid_order() {
        let cfg = PatchConfig::new(4, 2, 8, false);
        let clip = random_clip(4, 8, 8, 3, 2);
        let (m, grid) = patchify(&clip, &cfg).unwrap();
        let perm: Vec<usize> = (0..grid.len()).rev().collect();
        let shuffled = m.select(ndarray::Axis(0), &perm);
        let mut inverse = vec![0; perm.len()];
        for (pos, &src) in perm.iter().enumerate() {
            inverse[src] = pos;
        }
        let restored = shuffled.select(ndarray::Axis(0), &inverse);
        assert_eq!(
            unpatchify(&restored, grid, &cfg).unwrap().frames,
            clip.frames
        );
    }

    #[test]
    fn unpatchify_shape_errors() {
        let cfg = PatchConfig::new(4, 2, 8, false);
        let grid = Grid { t: 1, h: 2, w: 2 };
        assert!(unpatchify(&Matrix::zeros((3, 96)), grid, &cfg).is_err());
        assert!(unpatchify(&Matrix::zeros((4, 95)), grid, &cfg).is_err());
    }

    #[test]
    fn spt_projection_width() {
        let cfg = PatchConfig::new(8, 2, 64, true);
        assert_eq!(cfg.projection_input_dim(3), 1920);
        let (rows, grid) = projection_rows(&ClipTensor::zeros(2, 16, 16, 3), &cfg).unwrap();
        assert_eq!(rows.ncols(), 1920);
        let plain = PatchConfig {
            use_spt: false,
            ..cfg
        };
        let (plain_rows, plain_grid) =
            projection_rows(&ClipTensor::zeros(2, 16, 16, 3), &plain).unwrap();
        assert_eq!(grid, plain_grid);
        assert_eq!(rows.nrows(), plain_rows.nrows());
    }

    #[test]
    fn zero_shift_spt_repeats_channels() {
        let mut cfg = PatchConfig::new(4, 2, 8, true);
        cfg.spt_shift = 0;
        let clip = random_clip(2, 8, 8, 3, 3);
        let expanded = spt_expand(&clip, 0);
        for b in 0..5 {
            let block = expanded
                .frames
                .slice(ndarray::s![.., .., .., 3 * b..3 * b + 3]);
            assert_eq!(block, clip.frames);
        }
        let (rows, _) = projection_rows(&clip, &cfg).unwrap();
        for row in rows.rows() {
            for px in row.as_slice().unwrap().chunks(15) {
                assert!(px.chunks(3).all(|c| c == &px[..3]));
            }
        }
    }

    #[test]
    fn spt_zero_clip_tokens_are_constant() {
        let cfg = PatchConfig::new(4, 2, 8, true);
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let embed = PatchEmbed::new(&mut store, &mut Init { rng: &mut rng }, "embed", cfg, 3);
        // Perturb the norm bias so the constant pattern is non-trivial.
        let beta = embed.norm.as_ref().unwrap().beta;
        store.get_mut(beta).mapv_inplace(|_| rng.random::<f64>());
        let tg = shifted_patch_tokenize(&embed, &store, &ClipTensor::zeros(4, 8, 8, 3)).unwrap();
        for r in 1..tg.tokens.nrows() {
            assert_eq!(tg.tokens.row(r), tg.tokens.row(0));
        }
        let expected =
            store.get(beta).dot(store.get(embed.proj.weight)) + store.get(embed.proj.bias.unwrap());
        for (a, b) in tg.tokens.row(0).iter().zip(expected.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_parameter_count() {
        let mut store = ParamStore::new();
        let mut rng = seeded(0);
        let pos = PosEmbed::new(
            &mut store,
            &mut Init { rng: &mut rng },
            "pos",
            Grid { t: 8, h: 8, w: 8 },
            128,
        );
        assert_eq!(pos.parameter_count(), 9216);
        assert_eq!(store.count(), 9216);
        assert!(pos.is_injective(&store));
    }

    #[test]
    fn positions_are_additive_and_factorized() {
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        let grid = Grid { t: 3, h: 2, w: 2 };
        let pos = PosEmbed::new(&mut store, &mut Init { rng: &mut rng }, "pos", grid, 6);
        let zero = TokenGrid {
            tokens: Matrix::zeros((12, 6)),
            grid,
        };
        let with = add_positions(&zero, &pos, &store).unwrap();
        assert_eq!(with.tokens, pos.table(&store));
        // Same spatial cell, temporal rows 0 and 2.
        let temporal = store.get(pos.temporal);
        let diff = &with.tokens.row(8) - &with.tokens.row(0);
        let expected = &temporal.row(2) - &temporal.row(0);
        for (a, b) in diff.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn target_normalization() {
        let m =
            Matrix::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(patch_target_normalize(&m, false), m);
        let n = patch_target_normalize(&m, true);
        assert!(n.row(1).iter().all(|&v| v == 0.0));
        let mut rng = seeded(9);
        let r = Matrix::from_shape_fn((1, 384), |_| rng.random::<f64>() * 3.0 - 1.0);
        let n = patch_target_normalize(&r, true);
        let mean = n.sum() / 384.0;
        let var = n.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 384.0;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }
}
