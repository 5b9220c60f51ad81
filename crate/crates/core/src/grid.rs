//! Reconstruction figure: rows original, masked input and reconstruction,
//! one column per reported frame.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::dataset::ClipTensor;
use crate::error::{Error, Result};
use crate::masking::{sample_mask, MaskPlan};
use crate::model::Squash;
use crate::rng::derive_seed;
use crate::tokenizer::{patchify, unpatchify, PatchConfig};
use crate::training::eval::{tile_starts, REPORT_FRAMES};
use crate::training::stage::{reconstruct_pixels, Trained};

/// Fill value of hidden patches in the masked-input row.
pub const MASK_FILL: f32 = 0.5;

/// Full-length clips for the three grid rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GridRows {
    pub original: ClipTensor,
    pub masked: ClipTensor,
    pub reconstruction: ClipTensor,
}

/// Mask plan of window `w` of a clip; the same rule the reconstruction
/// evaluator uses for clip 0.
pub fn window_plan(n_tokens: usize, ratio: f64, seed: u64, w: usize) -> Result<MaskPlan> {
    if ratio == 0.0 {
        Ok(MaskPlan::full(n_tokens))
    } else {
        sample_mask(n_tokens, ratio, derive_seed(seed, w as u64))
    }
}

/// `clip` with every masked patch replaced by [`MASK_FILL`].
pub fn masked_input(clip: &ClipTensor, plan: &MaskPlan, patch: &PatchConfig) -> Result<ClipTensor> {
    let (mut rows, grid) = patchify(clip, patch)?;
    for &i in &plan.masked_idx {
        rows.row_mut(i).fill(f64::from(MASK_FILL));
    }
    let mut out = unpatchify(&rows, grid, patch)?;
    out.fps = clip.fps;
    Ok(out)
}

/// Tiles `clip` with the model's window; each frame comes from the first
/// window covering it.
pub fn reconstruct_clip(
    trained: &Trained,
    clip: &ClipTensor,
    mask_ratio: f64,
    seed: u64,
) -> Result<GridRows> {
    let model = &trained.model;
    let patch = model.cfg.encoder.patch;
    let window = model.cfg.input.frames;
    let frames = clip.num_frames();
    let mut masked = clip.clone();
    let mut recon = ClipTensor::new(clip.frames.clone(), clip.fps);
    let mut covered = vec![false; frames];
    for (w, start) in tile_starts(frames, window).into_iter().enumerate() {
        let idx: Vec<usize> = (start..start + window).collect();
        let win = clip.select_frames(&idx);
        let plan = window_plan(model.n_tokens(), mask_ratio, seed, w)?;
        let pixels = reconstruct_pixels(
            model,
            &win,
            &plan,
            trained.config.norm_pix_loss,
            Squash::Clamp,
        )?;
        let grid = patch.grid_for(window, win.dims().1, win.dims().2)?;
        let rec = unpatchify(&pixels, grid, &patch)?;
        let hid = masked_input(&win, &plan, &patch)?;
        for (k, &f) in idx.iter().enumerate() {
            if !covered[f] {
                covered[f] = true;
                recon
                    .frames
                    .index_axis_mut(ndarray::Axis(0), f)
                    .assign(&rec.frames.index_axis(ndarray::Axis(0), k));
                masked
                    .frames
                    .index_axis_mut(ndarray::Axis(0), f)
                    .assign(&hid.frames.index_axis(ndarray::Axis(0), k));
            }
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::WindowTooLarge {
            window,
            rate: 1,
            frames,
        });
    }
    Ok(GridRows {
        original: clip.clone(),
        masked,
        reconstruction: recon,
    })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 3×5 mosaic at the reported frames (1-based), without gutters.
pub fn render_grid(rows: &GridRows) -> Result<RgbImage> {
    let (t, h, w, c) = rows.original.dims();
    if c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "grid needs 3 channels, got {c}"
        )));
    }
    if let Some(&f) = REPORT_FRAMES.iter().find(|&&f| f > t) {
        return Err(Error::ShapeMismatch(format!(
            "frame {f} requested from a {t}-frame clip"
        )));
    }
    let mut img = RgbImage::new((w * REPORT_FRAMES.len()) as u32, (h * 3) as u32);
    for (r, clip) in [&rows.original, &rows.masked, &rows.reconstruction]
        .into_iter()
        .enumerate()
    {
        for (col, &f) in REPORT_FRAMES.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let px = |ch| to_u8(clip.frames[[f - 1, y, x, ch]]);
                    img.put_pixel(
                        (col * w + x) as u32,
                        (r * h + y) as u32,
                        Rgb([px(0), px(1), px(2)]),
                    );
                }
            }
        }
    }
    Ok(img)
}

/// Writes the grid as PNG.
pub fn save_grid(rows: &GridRows, path: &Path) -> Result<()> {
    render_grid(rows)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn clip(t: usize) -> ClipTensor {
        ClipTensor::new(
            Array4::from_shape_fn((t, 4, 4, 3), |(f, y, x, c)| {
                ((f + y + x + c) % 7) as f32 / 6.0
            }),
            10.0,
        )
    }

    #[test]
    fn full_plan_leaves_input_unchanged() {
        let c = clip(4);
        let patch = PatchConfig::new(2, 2, 4, false);
        assert_eq!(masked_input(&c, &MaskPlan::full(8), &patch).unwrap(), c);
    }

    #[test]
    fn grid_layout_is_three_by_five() {
        let c = clip(100);
        let rows = GridRows {
            original: c.clone(),
            masked: c.clone(),
            reconstruction: c,
        };
        let img = render_grid(&rows).unwrap();
        assert_eq!(img.dimensions(), (20, 12));
        // Column 1 shows frame 40 (index 39) of the middle row.
        let expected = to_u8(rows.masked.frames[[39, 1, 2, 0]]);
        assert_eq!(img.get_pixel(4 + 2, 4 + 1)[0], expected);
        assert!(render_grid(&GridRows {
            original: clip(50),
            masked: clip(50),
            reconstruction: clip(50)
        })
        .is_err());
    }
}
