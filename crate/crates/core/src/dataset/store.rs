use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::codec::{decode_clip_bytes, encode_clip_bytes};
use super::{ClipRecord, ClipTensor};
use crate::error::{Error, Result};

/// Anything that can produce the tensor for a manifest record.
pub trait ClipSource {
    fn load(&self, record: &ClipRecord) -> Result<ClipTensor>;
}

impl<F> ClipSource for F
where
    F: Fn(&ClipRecord) -> Result<ClipTensor>,
{
    fn load(&self, record: &ClipRecord) -> Result<ClipTensor> {
        self(record)
    }
}

/// Directory of 8-bit clip files, one per clip id.
#[derive(Clone, Debug)]
pub struct ClipStore {
    root: PathBuf,
}

impl ClipStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_for(&self, clip_id: &str) -> PathBuf {
        self.root.join(format!("{clip_id}.clip"))
    }

    pub fn save(&self, clip_id: &str, clip: &ClipTensor) -> Result<PathBuf> {
        fs::create_dir_all(&self.root)?;
        let path = self.path_for(clip_id);
        fs::write(&path, encode_clip_bytes(clip))?;
        Ok(path)
    }

    /// Loads a clip and checks it against the record's geometry.
    pub fn load_clip_tensor(&self, record: &ClipRecord) -> Result<ClipTensor> {
        let path = self.path_for(&record.clip_id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingClipFile(path))
            }
            Err(e) => return Err(e.into()),
        };
        let clip = decode_clip_bytes(&bytes, &path.display().to_string())?;
        let (t, h, w, _) = clip.dims();
        if (t, h, w) != (record.frame_count, record.height, record.width) {
            return Err(Error::ShapeMismatch(format!(
                "clip {} is {t}×{h}×{w}, record says {}×{}×{}",
                record.clip_id, record.frame_count, record.height, record.width
            )));
        }
        Ok(clip)
    }
}

impl ClipSource for ClipStore {
    fn load(&self, record: &ClipRecord) -> Result<ClipTensor> {
        self.load_clip_tensor(record)
    }
}

/// Clips held in memory, keyed by clip id.
#[derive(Clone, Debug, Default)]
pub struct InMemoryClips {
    pub clips: HashMap<String, ClipTensor>,
}

impl InMemoryClips {
    pub fn insert(&mut self, clip_id: impl Into<String>, clip: ClipTensor) {
        self.clips.insert(clip_id.into(), clip);
    }
}

impl ClipSource for InMemoryClips {
    fn load(&self, record: &ClipRecord) -> Result<ClipTensor> {
        self.clips
            .get(&record.clip_id)
            .cloned()
            .ok_or_else(|| Error::MissingClipFile(PathBuf::from(&record.clip_id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    #[test]
    fn noise_clip_round_trips_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let store = ClipStore::new(dir.path());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let clip = ClipTensor::new(
            Array4::from_shape_fn((100, 64, 64, 3), |_| rng.random::<f32>()),
            10.0,
        );
        let record = ClipRecord::normalized("noise", "mem", "a");
        store.save("noise", &clip).unwrap();
        let back = store.load_clip_tensor(&record).unwrap();
        assert_eq!(back.dims(), (100, 64, 64, 3));
        let max_err = clip
            .frames
            .iter()
            .zip(back.frames.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0, "{max_err}");
    }

    #[test]
    fn deleted_file_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let store = ClipStore::new(dir.path());
        let record = ClipRecord::normalized("gone", "mem", "a");
        assert!(matches!(
            store.load_clip_tensor(&record),
            Err(Error::MissingClipFile(_))
        ));
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = ClipStore::new(dir.path());
        store
            .save("small", &ClipTensor::zeros(10, 8, 8, 3))
            .unwrap();
        let record = ClipRecord::normalized("small", "mem", "a");
        assert!(matches!(
            store.load_clip_tensor(&record),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
