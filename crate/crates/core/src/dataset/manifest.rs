use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Deserialize;

use super::store::ClipStore;
use super::transcode::{transcode_clip, DecodeSpec};
use super::{ClipRecord, Split};
use crate::error::{Error, Result};
use crate::rng::seeded;

/// A source tree plus the annotation file labelling its clips.
///
/// The annotation is CSV with a header row and columns `path,label`, plus an
/// optional `clip_id` column. Paths are relative to `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceCollection {
    pub root: PathBuf,
    pub annotation: PathBuf,
}

impl SourceCollection {
    /// Collection whose annotation lives at `root/annotations.csv`.
    pub fn at(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        let annotation = root.join("annotations.csv");
        Self { root, annotation }
    }
}

#[derive(Deserialize)]
struct AnnotationRow {
    path: String,
    label: String,
    #[serde(default)]
    clip_id: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ClipRecord>,
    /// Sorted class names.
    pub classes: Vec<String>,
    /// Clip count per class.
    pub stats: BTreeMap<String, usize>,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting duplicate clip ids.
    pub fn from_records(records: Vec<ClipRecord>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut stats = BTreeMap::new();
        for r in &records {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::DuplicateClipId(r.clip_id.clone()));
            }
            *stats.entry(r.action_class.clone()).or_insert(0) += 1;
        }
        let classes = stats.keys().cloned().collect();
        Ok(Self {
            records,
            classes,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Sorted classes that own at least one clip in `split`.
    pub fn classes_in(&self, split: Split) -> Vec<String> {
        self.records_in(split)
            .map(|r| r.action_class.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn clip_count(&self, split: Split) -> usize {
        self.records_in(split).count()
    }

    /// True when no class has clips in both splits.
    pub fn is_class_disjoint(&self) -> bool {
        let train: BTreeSet<_> = self.classes_in(Split::Train).into_iter().collect();
        self.classes_in(Split::Test)
            .iter()
            .all(|c| !train.contains(c))
    }

    /// One JSON record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingClipFile(path.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClipRecord = serde_json::from_str(&line).map_err(|e| {
                Error::format(path.display().to_string(), format!("line {}: {e}", i + 1))
            })?;
            records.push(rec);
        }
        Self::from_records(records)
    }
}

fn sanitize_id(raw: &str) -> String {
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Reads every annotation and emits one record per clip.
pub fn build_manifest(sources: &[SourceCollection]) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    for src in sources {
        if !src.root.exists() {
            return Err(Error::MissingClipFile(src.root.clone()));
        }
        if !src.annotation.exists() {
            return Err(Error::MissingClipFile(src.annotation.clone()));
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&src.annotation)
            .map_err(|e| Error::format(src.annotation.display().to_string(), e))?;
        let mut count = 0;
        for row in reader.deserialize::<AnnotationRow>() {
            let row = row.map_err(|e| Error::format(src.annotation.display().to_string(), e))?;
            let path = src.root.join(&row.path);
            if !path.is_file() {
                return Err(Error::MissingClipFile(path));
            }
            let id = match row.clip_id.filter(|s| !s.is_empty()) {
                Some(id) => sanitize_id(&id),
                None => sanitize_id(
                    &Path::new(&row.path)
                        .file_stem()
                        .unwrap_or_default()
                        .to_string_lossy(),
                ),
            };
            records.push(ClipRecord::normalized(
                id,
                path.display().to_string(),
                row.label,
            ));
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyAnnotation(src.annotation.clone()));
        }
    }
    DatasetManifest::from_records(records)
}

/// Assigns whole classes to train or test.
///
/// `round(train_fraction · |classes|)` classes, drawn uniformly under `seed`,
/// go to train; the rest go to test.
pub fn split_by_class(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let n = manifest.classes.len();
    if n < 2 {
        return Err(Error::TooFewClasses(n));
    }
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order = manifest.classes.clone();
    order.shuffle(&mut seeded(seed));
    let train: HashSet<&str> = order[..n_train].iter().map(String::as_str).collect();
    let mut out = manifest.clone();
    for r in &mut out.records {
        r.split = if train.contains(r.action_class.as_str()) {
            Split::Train
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Full pipeline: manifest, class split, transcoding into `out/clips`, and
/// `out/manifest.jsonl`.
pub fn build_dataset(
    sources: &[SourceCollection],
    out: &Path,
    spec: DecodeSpec,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let manifest = build_manifest(sources)?;
    let mut manifest = split_by_class(&manifest, train_fraction, seed)?;
    let store = ClipStore::new(out.join("clips"));
    for r in &mut manifest.records {
        let bytes = fs::read(&r.source_path)?;
        let clip = transcode_clip(&bytes, &r.source_path, spec)?;
        store.save(&r.clip_id, &clip)?;
        let (t, h, w, _) = clip.dims();
        r.frame_count = t;
        r.height = h;
        r.width = w;
        r.fps = spec.fps;
    }
    manifest.write(&out.join("manifest.jsonl"))?;
    Ok(manifest)
}
