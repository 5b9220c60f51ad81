//! Procedural moving-shape videos. Each class is a (shape, motion) pair;
//! clips of a class differ in start position, speed and size. Clips are
//! generated from their id on demand, so large corpora cost no memory.

use ndarray::Array4;
use rand::Rng;

use crate::dataset::{ClipRecord, ClipSource, ClipTensor, DatasetManifest, CLIP_FPS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Cross,
    Ring,
    Bar,
}

const SHAPES: [Shape; 6] = [
    Shape::Square,
    Shape::Disk,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Bar,
];

/// Unit velocities; the last is a vertical oscillation.
const MOTIONS: [(f64, f64); 6] = [
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (0.7, 0.7),
    (0.0, 0.0),
];

/// Distinct (shape, motion) classes available.
pub const MAX_CLASSES: usize = SHAPES.len() * MOTIONS.len();

/// Colour of each shape, channel intensities.
const COLOURS: [[f32; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub size: usize,
    /// Pixels strictly 0 or 1 (no colour shading, no noise).
    pub binary: bool,
    /// Standard deviation of additive background noise.
    pub noise: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, clips_per_class: usize, seed: u64) -> Self {
        Self {
            classes,
            clips_per_class,
            frames: 100,
            size: 64,
            binary: false,
            noise: 0.03,
            seed,
        }
    }

    pub fn class_name(c: usize) -> String {
        format!("shape{}_motion{}", c % SHAPES.len(), c / SHAPES.len())
    }

    pub fn clip_id(c: usize, i: usize) -> String {
        format!("syn_c{c:02}_{i:03}")
    }

    fn parse_id(id: &str) -> Option<(usize, usize)> {
        let rest = id.strip_prefix("syn_c")?;
        let (c, i) = rest.split_once('_')?;
        Some((c.parse().ok()?, i.parse().ok()?))
    }

    /// Manifest with every clip in the train split; split it with
    /// [`crate::dataset::split_by_class`].
    pub fn manifest(&self) -> Result<DatasetManifest> {
        if self.classes > MAX_CLASSES {
            return Err(Error::InvalidConfig(format!(
                "at most {MAX_CLASSES} synthetic classes"
            )));
        }
        let records = (0..self.classes)
            .flat_map(|c| {
                (0..self.clips_per_class).map(move |i| {
                    let mut r = ClipRecord::normalized(
                        Self::clip_id(c, i),
                        "synthetic",
                        Self::class_name(c),
                    );
                    r.frame_count = self.frames;
                    r.width = self.size;
                    r.height = self.size;
                    r
                })
            })
            .collect();
        DatasetManifest::from_records(records)
    }

    pub fn generate(&self, class: usize, index: usize) -> ClipTensor {
        let shape = SHAPES[class % SHAPES.len()];
        let motion = MOTIONS[(class / SHAPES.len()) % MOTIONS.len()];
        let mut rng = seeded(derive_seed(self.seed, (class * 100_003 + index) as u64));
        let s = self.size as f64;
        let radius = s * rng.random_range(0.14..0.2);
        let speed = s / 100.0 * rng.random_range(0.8..1.2);
        let (x0, y0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let colour = if self.binary {
            [1.0; 3]
        } else {
            COLOURS[class % COLOURS.len()]
        };
        let (n, side) = (self.frames, self.size);
        let mut frames = Array4::<f32>::zeros((n, side, side, 3));
        for t in 0..n {
            let (cx, cy) = if motion == (0.0, 0.0) {
                (x0, y0 + 0.25 * s * (phase + t as f64 * 0.15).sin())
            } else {
                (
                    x0 + motion.0 * speed * t as f64,
                    y0 + motion.1 * speed * t as f64,
                )
            };
            for y in 0..side {
                for x in 0..side {
                    // Toroidal distance so shapes wrap around the frame.
                    let wrap = |d: f64| d - s * (d / s).round();
                    let dx = wrap(x as f64 + 0.5 - cx.rem_euclid(s));
                    let dy = wrap(y as f64 + 0.5 - cy.rem_euclid(s));
                    if inside(shape, dx / radius, dy / radius) {
                        for c in 0..3 {
                            frames[[t, y, x, c]] = colour[c];
                        }
                    }
                }
            }
        }
        if !self.binary && self.noise > 0.0 {
            frames.mapv_inplace(|v| {
                (v + self.noise * (rng.random::<f32>() - 0.5) * 2.0).clamp(0.0, 1.0)
            });
        }
        ClipTensor::new(frames, CLIP_FPS)
    }
}

/// Membership test in units of the shape radius.
fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Shape::Disk => u * u + v * v <= 1.0,
        Shape::Triangle => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) * 0.6,
        Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        Shape::Ring => {
            let r2 = u * u + v * v;
            (0.4..=1.0).contains(&r2)
        }
        Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.25,
    }
}

impl ClipSource for SyntheticSpec {
    fn load(&self, record: &ClipRecord) -> Result<ClipTensor> {
        let (c, i) = Self::parse_id(&record.clip_id)
            .filter(|&(c, i)| c < self.classes && i < self.clips_per_class)
            .ok_or_else(|| Error::MissingClipFile(record.clip_id.clone().into()))?;
        Ok(self.generate(c, i))
    }
}
