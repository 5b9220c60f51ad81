//! Clip-level augmentation. Every random choice is made once per clip and
//! shared by all of its frames, so augmentations stay temporally consistent.

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};

use crate::autodiff::Matrix;
use crate::dataset::ClipTensor;
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Picks `window` frames at stride `rate`. Training windows start uniformly
/// at random; evaluation windows are centered.
pub fn sample_training_window(
    clip: &ClipTensor,
    rate: usize,
    window: usize,
    train: bool,
    seed: u64,
) -> Result<ClipTensor> {
    let frames = clip.num_frames();
    if rate == 0 || window == 0 || window * rate > frames {
        return Err(Error::WindowTooLarge {
            window,
            rate,
            frames,
        });
    }
    let slack = frames - window * rate;
    let start = if train {
        seeded(seed).random_range(0..=slack)
    } else {
        slack / 2
    };
    let idx: Vec<usize> = (0..window).map(|i| start + i * rate).collect();
    Ok(clip.select_frames(&idx))
}

/// Block-average downsampling of every frame by an integer factor.
pub fn downsample(clip: &ClipTensor, side: usize) -> Result<ClipTensor> {
    let (t, h, w, c) = clip.dims();
    if side == h && side == w {
        return Ok(clip.clone());
    }
    if side == 0 || h % side != 0 || w % side != 0 || h / side != w / side {
        return Err(Error::IndivisibleDimensions {
            dim: "H",
            size: h,
            by: side,
        });
    }
    let f = h / side;
    let norm = 1.0 / (f * f) as f32;
    let out = Array4::from_shape_fn((t, side, side, c), |(ti, y, x, ci)| {
        clip.frames
            .slice(s![ti, y * f..(y + 1) * f, x * f..(x + 1) * f, ci])
            .sum()
            * norm
    });
    Ok(ClipTensor::new(out, clip.fps))
}

/// `(1 − ε)·y + ε/K`.
pub fn smooth_labels(y: &[f64], eps: f64) -> Vec<f64> {
    let k = y.len() as f64;
    y.iter().map(|v| (1.0 - eps) * v + eps / k).collect()
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        m[[i, l]] = 1.0;
    }
    m
}

/// Mixed batch and the coefficient that produced it.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub clips: Vec<ClipTensor>,
    pub labels: Matrix,
    pub lambda: f64,
    pub permutation: Vec<usize>,
}

/// `λx + (1 − λ)x[perm]` on clips and labels alike.
pub fn mix_with(x: &[ClipTensor], y: &Matrix, lambda: f64, perm: &[usize]) -> Result<Mixed> {
    if x.len() != y.nrows() || perm.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} clips, {} label rows, {} permutation entries",
            x.len(),
            y.nrows(),
            perm.len()
        )));
    }
    let l = lambda as f32;
    let clips = x
        .iter()
        .zip(perm)
        .map(|(a, &j)| ClipTensor::new(&a.frames * l + &x[j].frames * (1.0 - l), a.fps))
        .collect();
    let labels = Matrix::from_shape_fn(y.dim(), |(i, k)| {
        lambda * y[[i, k]] + (1.0 - lambda) * y[[perm[i], k]]
    });
    Ok(Mixed {
        clips,
        labels,
        lambda,
        permutation: perm.to_vec(),
    })
}

/// Draws `λ ~ Beta(alpha, alpha)` and a batch permutation, then mixes.
pub fn mixup_batch(x: &[ClipTensor], y: &Matrix, alpha: f64, seed: u64) -> Result<Mixed> {
    if x.len() < 2 {
        return Err(Error::BatchTooSmall(x.len()));
    }
    let mut rng = seeded(seed);
    let lambda = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidConfig(format!("mixup alpha {alpha}: {e}")))?
        .sample(&mut rng);
    let mut perm: Vec<usize> = (0..x.len()).collect();
    perm.shuffle(&mut rng);
    mix_with(x, y, lambda, &perm)
}

/// Rectangle `(y0, x0, height, width)` in frame coordinates.
pub type Rect = (usize, usize, usize, usize);

/// Draws an erase rectangle covering 2–33% of an `h×w` frame.
pub fn erase_rect(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Rect {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.random_range(0.02..0.33);
        let aspect = rng.random_range((0.3f64).ln()..(1.0f64 / 0.3).ln()).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            return (
                rng.random_range(0..=h - eh),
                rng.random_range(0..=w - ew),
                eh,
                ew,
            );
        }
    }
    let side = ((0.1 * area).sqrt().round() as usize).clamp(1, h.min(w));
    (
        rng.random_range(0..=h - side),
        rng.random_range(0..=w - side),
        side,
        side,
    )
}

/// With probability `p`, fills one rectangle (the same on every frame) with
/// uniform noise. Returns the rectangle when erasing happened.
pub fn apply_random_erase(clip: &ClipTensor, p: f64, seed: u64) -> (ClipTensor, Option<Rect>) {
    let mut rng = seeded(seed);
    if rng.random::<f64>() >= p {
        return (clip.clone(), None);
    }
    let (t, h, w, c) = clip.dims();
    let rect = erase_rect(h, w, &mut rng);
    let (y0, x0, eh, ew) = rect;
    let mut out = clip.clone();
    for ti in 0..t {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                for ci in 0..c {
                    out.frames[[ti, y, x, ci]] = rng.random::<f32>();
                }
            }
        }
    }
    (out, Some(rect))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    AutoContrast,
    Equalize,
    Invert,
    Rotate,
    Posterize,
    Solarize,
    SolarizeAdd,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

const OPS: [AugOp; 15] = [
    AugOp::AutoContrast,
    AugOp::Equalize,
    AugOp::Invert,
    AugOp::Rotate,
    AugOp::Posterize,
    AugOp::Solarize,
    AugOp::SolarizeAdd,
    AugOp::Color,
    AugOp::Contrast,
    AugOp::Brightness,
    AugOp::Sharpness,
    AugOp::ShearX,
    AugOp::ShearY,
    AugOp::TranslateX,
    AugOp::TranslateY,
];

/// RandAugment settings parsed from strings like `rand-m7-mstd0.5-inc1`.
#[derive(Clone, Debug, PartialEq)]
pub struct RandAugment {
    /// Magnitude on a 0–10 scale.
    pub magnitude: f64,
    pub magnitude_std: f64,
    pub num_ops: usize,
    /// Magnitude-increasing variants of posterize and solarize.
    pub increasing: bool,
    pub prob: f64,
}

impl RandAugment {
    pub fn parse(policy: &str) -> Result<Self> {
        let mut parts = policy.split('-');
        if parts.next() != Some("rand") {
            return Err(Error::InvalidConfig(format!(
                "unsupported augmentation policy {policy:?}"
            )));
        }
        let mut ra = RandAugment {
            magnitude: 10.0,
            magnitude_std: 0.0,
            num_ops: 2,
            increasing: false,
            prob: 0.5,
        };
        for part in parts {
            let bad =
                || Error::InvalidConfig(format!("bad policy component {part:?} in {policy:?}"));
            let num = |prefix: &str| part[prefix.len()..].parse::<f64>().map_err(|_| bad());
            if part.starts_with("mstd") {
                ra.magnitude_std = num("mstd")?;
            } else if part.starts_with("inc") {
                ra.increasing = num("inc")? != 0.0;
            } else if part.starts_with('m') {
                ra.magnitude = num("m")?;
            } else if part.starts_with('n') {
                ra.num_ops = num("n")? as usize;
            } else if part.starts_with('p') {
                ra.prob = num("p")?;
            } else {
                return Err(bad());
            }
        }
        if !(0.0..=10.0).contains(&ra.magnitude)
            || ra.magnitude_std < 0.0
            || !(0.0..=1.0).contains(&ra.prob)
        {
            return Err(Error::InvalidConfig(format!(
                "policy {policy:?} out of range"
            )));
        }
        Ok(ra)
    }

    /// Draws the per-clip op list: `(op, level in [0, 1], sign)`.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<(AugOp, f64, f64)> {
        let mut ops = Vec::with_capacity(self.num_ops);
        for _ in 0..self.num_ops {
            let op = OPS[rng.random_range(0..OPS.len())];
            let apply = rng.random::<f64>() < self.prob;
            let mut m = self.magnitude;
            if self.magnitude_std > 0.0 {
                m = Normal::new(m, self.magnitude_std)
                    .expect("finite std")
                    .sample(rng);
            }
            let level = m.clamp(0.0, 10.0) / 10.0;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            if apply {
                ops.push((op, level, sign));
            }
        }
        ops
    }

    /// Applies one per-clip draw to every frame.
    pub fn apply(&self, clip: &ClipTensor, seed: u64) -> ClipTensor {
        let mut rng = seeded(seed);
        let ops = self.draw(&mut rng);
        let mut out = clip.clone();
        for (op, level, sign) in ops {
            for t in 0..out.num_frames() {
                let frame = out.frames.slice(s![t, .., .., ..]).to_owned();
                let next = apply_op(&frame, op, level, sign, self.increasing);
                out.frames.slice_mut(s![t, .., .., ..]).assign(&next);
            }
        }
        out.frames.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }
}

type Frame = ndarray::Array3<f32>;

fn luminance(f: &Frame) -> ndarray::Array2<f32> {
    let (h, w, c) = f.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        if c >= 3 {
            0.299 * f[[y, x, 0]] + 0.587 * f[[y, x, 1]] + 0.114 * f[[y, x, 2]]
        } else {
            f[[y, x, 0]]
        }
    })
}

fn blend(a: &Frame, b: &Frame, factor: f32) -> Frame {
    (b + &((a - b) * factor)).mapv(|v| v.clamp(0.0, 1.0))
}

/// Inverse-mapped affine warp with nearest sampling and mid-grey fill.
fn warp(f: &Frame, m: [f32; 6]) -> Frame {
    let (h, w, c) = f.dim();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    Frame::from_shape_fn((h, w, c), |(y, x, ch)| {
        let (dx, dy) = (x as f32 - cx, y as f32 - cy);
        let sx = m[0] * dx + m[1] * dy + m[2] + cx;
        let sy = m[3] * dx + m[4] * dy + m[5] + cy;
        let (ix, iy) = (sx.round(), sy.round());
        if ix < 0.0 || iy < 0.0 || ix >= w as f32 || iy >= h as f32 {
            0.5
        } else {
            f[[iy as usize, ix as usize, ch]]
        }
    })
}

fn apply_op(f: &Frame, op: AugOp, level: f64, sign: f64, increasing: bool) -> Frame {
    let level = level as f32;
    let sign = sign as f32;
    let (h, w, c) = f.dim();
    match op {
        AugOp::AutoContrast => {
            let mut out = f.clone();
            for ch in 0..c {
                let plane = f.slice(s![.., .., ch]);
                let lo = plane.fold(f32::INFINITY, |a, &b| a.min(b));
                let hi = plane.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                if hi > lo {
                    out.slice_mut(s![.., .., ch])
                        .mapv_inplace(|v| (v - lo) / (hi - lo));
                }
            }
            out
        }
        AugOp::Equalize => {
            let mut out = f.clone();
            for ch in 0..c {
                let mut hist = [0usize; 256];
                for &v in f.slice(s![.., .., ch]) {
                    hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
                }
                let mut cdf = [0usize; 256];
                let mut acc = 0;
                for (i, n) in hist.iter().enumerate() {
                    acc += n;
                    cdf[i] = acc;
                }
                let total = (h * w) as f32;
                out.slice_mut(s![.., .., ch]).mapv_inplace(|v| {
                    cdf[(v.clamp(0.0, 1.0) * 255.0).round() as usize] as f32 / total
                });
            }
            out
        }
        AugOp::Invert => f.mapv(|v| 1.0 - v),
        AugOp::Rotate => {
            let a = (30.0 * level * sign).to_radians();
            let (sn, cs) = a.sin_cos();
            warp(f, [cs, sn, 0.0, -sn, cs, 0.0])
        }
        AugOp::Posterize => {
            let bits = if increasing {
                4.0 - 4.0 * level
            } else {
                4.0 + 4.0 * level
            };
            let levels = 2f32.powi(bits.round().clamp(1.0, 8.0) as i32);
            f.mapv(|v| (v * levels).floor().min(levels - 1.0) / levels)
        }
        AugOp::Solarize => {
            let threshold = if increasing { 1.0 - level } else { level };
            f.mapv(|v| if v >= threshold { 1.0 - v } else { v })
        }
        AugOp::SolarizeAdd => {
            let add = 110.0 / 255.0 * level;
            f.mapv(|v| if v < 0.5 { (v + add).min(1.0) } else { v })
        }
        AugOp::Color => {
            let grey = luminance(f);
            let g = Frame::from_shape_fn((h, w, c), |(y, x, _)| grey[[y, x]]);
            blend(f, &g, 1.0 + 0.9 * level * sign)
        }
        AugOp::Contrast => {
            let mean = luminance(f).mean().unwrap_or(0.0);
            blend(
                f,
                &Frame::from_elem((h, w, c), mean),
                1.0 + 0.9 * level * sign,
            )
        }
        AugOp::Brightness => blend(f, &Frame::zeros((h, w, c)), 1.0 + 0.9 * level * sign),
        AugOp::Sharpness => {
            let smooth = Frame::from_shape_fn((h, w, c), |(y, x, ch)| {
                if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                    return f[[y, x, ch]];
                }
                let mut acc = 5.0 * f[[y, x, ch]];
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += f[[y + dy - 1, x + dx - 1, ch]];
                    }
                }
                (acc - f[[y, x, ch]]) / 13.0
            });
            blend(f, &smooth, 1.0 + 0.9 * level * sign)
        }
        AugOp::ShearX => warp(f, [1.0, 0.3 * level * sign, 0.0, 0.0, 1.0, 0.0]),
        AugOp::ShearY => warp(f, [1.0, 0.0, 0.0, 0.3 * level * sign, 1.0, 0.0]),
        AugOp::TranslateX => warp(f, [1.0, 0.0, 0.45 * w as f32 * level * sign, 0.0, 1.0, 0.0]),
        AugOp::TranslateY => warp(f, [1.0, 0.0, 0.0, 0.0, 1.0, 0.45 * h as f32 * level * sign]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize) -> ClipTensor {
        ClipTensor::new(
            Array4::from_shape_fn((t, 8, 8, 3), |(t, y, x, c)| {
                ((t * 7 + y * 3 + x + c) % 11) as f32 / 10.0
            }),
            10.0,
        )
    }

    fn frame_marks(clip: &ClipTensor) -> Vec<usize> {
        (0..clip.num_frames())
            .map(|t| clip.frames[[t, 0, 0, 0]] as usize)
            .collect()
    }

    fn numbered(t: usize) -> ClipTensor {
        ClipTensor::new(
            Array4::from_shape_fn((t, 2, 2, 1), |(t, ..)| t as f32),
            10.0,
        )
    }

    #[test]
    fn window_at_stride_four() {
        let clip = numbered(100);
        let w = sample_training_window(&clip, 4, 16, false, 0).unwrap();
        assert_eq!(
            frame_marks(&w),
            (0..16).map(|i| 18 + 4 * i).collect::<Vec<_>>()
        );
        assert_eq!(
            frame_marks(&sample_training_window(&clip, 1, 100, true, 5).unwrap()),
            (0..100).collect::<Vec<_>>()
        );
        let idx: Vec<usize> = (0..16).map(|i| 4 * i).collect();
        assert_eq!(
            frame_marks(&clip.select_frames(&idx)),
            (0..16).map(|i| 4 * i).collect::<Vec<_>>()
        );
        assert!(matches!(
            sample_training_window(&clip, 7, 16, true, 0),
            Err(Error::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn eval_windows_repeat_and_train_windows_vary() {
        let clip = numbered(100);
        let a = sample_training_window(&clip, 4, 16, false, 1).unwrap();
        let b = sample_training_window(&clip, 4, 16, false, 2).unwrap();
        assert_eq!(a, b);
        let starts: std::collections::HashSet<usize> = (0..50)
            .map(|s| frame_marks(&sample_training_window(&clip, 4, 16, true, s).unwrap())[0])
            .collect();
        assert!(starts.len() > 10);
        assert!(starts.iter().all(|&s| s <= 36));
    }

    #[test]
    fn smoothing_examples() {
        let s = smooth_labels(&[1.0, 0.0, 0.0, 0.0], 0.1);
        for (a, b) in s.iter().zip([0.925, 0.025, 0.025, 0.025]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(smooth_labels(&[0.3, 0.7], 0.0), vec![0.3, 0.7]);
    }

    #[test]
    fn mixup_boundaries() {
        let x = vec![ramp(2), ramp(3).select_frames(&[0, 1])];
        let y = one_hot(&[0, 1], 4);
        let same = mix_with(&x, &y, 1.0, &[1, 0]).unwrap();
        assert_eq!(same.labels, y);
        assert_eq!(same.clips, x);
        let half = mix_with(&x, &y, 0.5, &[1, 0]).unwrap();
        assert_eq!(half.labels.row(0).to_vec(), vec![0.5, 0.5, 0.0, 0.0]);
        assert!(matches!(
            mixup_batch(&x[..1], &y.slice(s![..1, ..]).to_owned(), 1.0, 0),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn erase_probability_zero_is_identity() {
        let clip = ramp(4);
        for seed in 0..20 {
            assert_eq!(apply_random_erase(&clip, 0.0, seed).0, clip);
        }
    }

    #[test]
    fn policy_parsing() {
        let ra = RandAugment::parse("rand-m7-mstd0.5-inc1").unwrap();
        assert_eq!(
            (ra.magnitude, ra.magnitude_std, ra.num_ops, ra.increasing),
            (7.0, 0.5, 2, true)
        );
        assert!(RandAugment::parse("auto-v0").is_err());
        assert!(RandAugment::parse("rand-q3").is_err());
    }

    #[test]
    fn randaugment_shares_ops_across_frames() {
        let frame = ramp(1);
        let clip = ClipTensor::new(
            ndarray::concatenate(
                ndarray::Axis(0),
                &[
                    frame.frames.view(),
                    frame.frames.view(),
                    frame.frames.view(),
                ],
            )
            .unwrap(),
            10.0,
        );
        let ra = RandAugment {
            prob: 1.0,
            ..RandAugment::parse("rand-m9-n3").unwrap()
        };
        for seed in 0..20 {
            let out = ra.apply(&clip, seed);
            assert!(out.in_unit_range());
            for t in 1..3 {
                assert_eq!(
                    out.frames.slice(s![t, .., .., ..]),
                    out.frames.slice(s![0, .., .., ..])
                );
            }
        }
    }

    #[test]
    fn downsample_averages_blocks() {
        let clip = ClipTensor::new(
            Array4::from_shape_fn((1, 4, 4, 1), |(_, y, x, _)| (y * 4 + x) as f32),
            10.0,
        );
        let d = downsample(&clip, 2).unwrap();
        assert_eq!(
            d.frames.iter().copied().collect::<Vec<_>>(),
            vec![2.5, 4.5, 10.5, 12.5]
        );
    }
}
