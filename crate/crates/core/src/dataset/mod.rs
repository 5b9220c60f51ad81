//! Source ingestion, clip normalization and the dataset manifest.

mod codec;
mod manifest;
mod store;
mod transcode;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

pub use codec::{decode_source, encode_clip_bytes, DecodedVideo};
pub use manifest::{
    build_dataset, build_manifest, split_by_class, DatasetManifest, SourceCollection,
};
pub use store::{ClipSource, ClipStore, InMemoryClips};
pub use transcode::{transcode_clip, transcode_decoded, DecodeSpec};

/// Frames per normalized clip.
pub const CLIP_FRAMES: usize = 100;
/// Frame rate of normalized clips.
pub const CLIP_FPS: f64 = 10.0;
/// Side length of normalized frames.
pub const CLIP_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One normalized clip in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source_path: String,
    pub action_class: String,
    pub split: Split,
    pub frame_count: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
}

impl ClipRecord {
    /// Record in the normalized 100×64×64 @ 10 FPS format.
    pub fn normalized(
        clip_id: impl Into<String>,
        source_path: impl Into<String>,
        class: impl Into<String>,
    ) -> Self {
        Self {
            clip_id: clip_id.into(),
            source_path: source_path.into(),
            action_class: class.into(),
            split: Split::Train,
            frame_count: CLIP_FRAMES,
            fps: CLIP_FPS,
            width: CLIP_SIZE,
            height: CLIP_SIZE,
        }
    }
}

/// Decoded clip as a `T×H×W×C` array with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipTensor {
    pub frames: Array4<f32>,
    pub fps: f64,
}

impl ClipTensor {
    pub fn new(frames: Array4<f32>, fps: f64) -> Self {
        Self { frames, fps }
    }

    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            frames: Array4::zeros((t, h, w, c)),
            fps: CLIP_FPS,
        }
    }

    /// `(T, H, W, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.frames.dim()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    /// Selects frames by index, in the given order.
    pub fn select_frames(&self, idx: &[usize]) -> ClipTensor {
        ClipTensor {
            frames: self.frames.select(ndarray::Axis(0), idx),
            fps: self.fps,
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.frames.iter().all(|v| (0.0..=1.0).contains(v))
    }
}
