//! N-way K-shot episodes over action classes and the one-step label offset
//! used by the memory-augmented learner.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClipRecord, ClipSource, ClipTensor, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub split: Split,
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot < 1 || self.q_queries < 1 {
            return Err(Error::InvalidConfig(format!(
                "episode needs n_way ≥ 2, k_shot ≥ 1, q_queries ≥ 1 (got {}, {}, {})",
                self.n_way, self.k_shot, self.q_queries
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_way * (self.k_shot + self.q_queries)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One episode; items are `(payload, local_label)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T = ClipRecord> {
    pub support: Vec<(T, usize)>,
    pub query: Vec<(T, usize)>,
    /// `class_map[local_label]` is the global class name.
    pub class_map: Vec<String>,
}

impl<T: Clone> Episode<T> {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    pub fn len(&self) -> usize {
        self.support.len() + self.query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Support block then query block.
    pub fn sequence(&self) -> Vec<(T, usize)> {
        self.support
            .iter()
            .chain(self.query.iter())
            .cloned()
            .collect()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Episode<U> {
        Episode {
            support: self.support.iter().map(|(x, l)| (f(x), *l)).collect(),
            query: self.query.iter().map(|(x, l)| (f(x), *l)).collect(),
            class_map: self.class_map.clone(),
        }
    }

    pub fn try_map<U>(&self, mut f: impl FnMut(&T) -> Result<U>) -> Result<Episode<U>> {
        let mut conv = |items: &[(T, usize)]| {
            items
                .iter()
                .map(|(x, l)| Ok((f(x)?, *l)))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Episode {
            support: conv(&self.support)?,
            query: conv(&self.query)?,
            class_map: self.class_map.clone(),
        })
    }
}

impl Episode<ClipRecord> {
    pub fn materialize(&self, source: &dyn ClipSource) -> Result<Episode<ClipTensor>> {
        self.try_map(|r| source.load(r))
    }
}

pub fn sample_episode(
    manifest: &DatasetManifest,
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<Episode> {
    cfg.validate()?;
    let mut by_class: BTreeMap<&str, Vec<&ClipRecord>> = BTreeMap::new();
    for r in manifest.records_in(cfg.split) {
        by_class.entry(r.action_class.as_str()).or_default().push(r);
    }
    if by_class.len() < cfg.n_way {
        return Err(Error::InsufficientClasses {
            needed: cfg.n_way,
            found: by_class.len(),
        });
    }
    let need = cfg.k_shot + cfg.q_queries;
    let eligible: Vec<&str> = by_class
        .iter()
        .filter(|(_, v)| v.len() >= need)
        .map(|(c, _)| *c)
        .collect();
    if eligible.len() < cfg.n_way {
        let (class, clips) = by_class
            .iter()
            .find(|(_, v)| v.len() < need)
            .expect("some class is short");
        return Err(Error::InsufficientClipsInClass {
            class: class.to_string(),
            needed: need,
            found: clips.len(),
        });
    }
    let mut rng = seeded(seed);
    let mut classes: Vec<&str> = eligible
        .choose_multiple(&mut rng, cfg.n_way)
        .copied()
        .collect();
    classes.shuffle(&mut rng);
    let mut support = Vec::with_capacity(cfg.n_way * cfg.k_shot);
    let mut query = Vec::with_capacity(cfg.n_way * cfg.q_queries);
    for (label, class) in classes.iter().enumerate() {
        let mut clips = by_class[class].clone();
        clips.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        let picked: Vec<&ClipRecord> = clips.choose_multiple(&mut rng, need).copied().collect();
        support.extend(picked[..cfg.k_shot].iter().map(|r| ((*r).clone(), label)));
        query.extend(picked[cfg.k_shot..].iter().map(|r| ((*r).clone(), label)));
    }
    support.shuffle(&mut rng);
    query.shuffle(&mut rng);
    Ok(Episode {
        support,
        query,
        class_map: classes.into_iter().map(String::from).collect(),
    })
}

/// Label-offset sequence: inputs pair item `t` with label `t−1` (`None` at
/// step 0); `targets` holds the true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Shifted<T> {
    pub inputs: Vec<(T, Option<usize>)>,
    pub targets: Vec<usize>,
}

pub fn shift_labels<T: Clone>(items: &[(T, usize)]) -> Result<Shifted<T>> {
    if items.is_empty() {
        return Err(Error::EmptyEpisode);
    }
    let inputs = items
        .iter()
        .enumerate()
        .map(|(t, (x, _))| (x.clone(), t.checked_sub(1).map(|p| items[p].1)))
        .collect();
    Ok(Shifted {
        inputs,
        targets: items.iter().map(|(_, l)| *l).collect(),
    })
}

/// Recovers the label sequence (minus its last element) from shifted inputs.
pub fn unshift_labels<T>(shifted: &Shifted<T>) -> Vec<usize> {
    shifted
        .inputs
        .iter()
        .skip(1)
        .map(|(_, l)| l.expect("only step 0 lacks a label"))
        .collect()
}

/// One-hot of width `n_way + 1`; the last slot is the null label.
pub fn label_onehot(label: Option<usize>, n_way: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_way + 1];
    v[label.unwrap_or(n_way)] = 1.0;
    v
}

/// Seed and config that regenerate an episode stream exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReplay {
    pub seed: u64,
    pub config: EpisodeConfig,
    pub count: usize,
}

impl EpisodeReplay {
    /// Seed of the `i`-th episode.
    pub fn episode_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, i as u64)
    }

    pub fn episodes(&self, manifest: &DatasetManifest) -> Result<Vec<Episode>> {
        (0..self.count)
            .map(|i| sample_episode(manifest, &self.config, self.episode_seed(i)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(
            path,
            serde_json::to_string_pretty(self).expect("replay serializes"),
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn manifest(classes: usize, per_class: usize) -> DatasetManifest {
        let records = (0..classes)
            .flat_map(|c| {
                (0..per_class).map(move |i| {
                    ClipRecord::normalized(format!("c{c}_{i}"), "mem", format!("k{c:02}"))
                })
            })
            .collect();
        DatasetManifest::from_records(records).unwrap()
    }

    fn cfg(n_way: usize, k: usize, q: usize) -> EpisodeConfig {
        EpisodeConfig {
            n_way,
            k_shot: k,
            q_queries: q,
            split: Split::Train,
        }
    }

    #[test]
    fn cardinality_contract() {
        let m = manifest(10, 4);
        let e = sample_episode(&m, &cfg(5, 1, 1), 0).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 5));
        for set in [&e.support, &e.query] {
            let mut labels: Vec<_> = set.iter().map(|x| x.1).collect();
            labels.sort();
            assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        }
        let ids: HashSet<_> = e
            .sequence()
            .iter()
            .map(|(r, _)| r.clip_id.clone())
            .collect();
        assert_eq!(ids.len(), 10);
        for (r, l) in e.sequence() {
            assert_eq!(r.action_class, e.class_map[l]);
        }
    }

    #[test]
    fn all_classes_used_when_n_way_equals_split() {
        let m = manifest(6, 3);
        let e = sample_episode(&m, &cfg(6, 2, 1), 4).unwrap();
        let mut used = e.class_map.clone();
        used.sort();
        assert_eq!(used, m.classes);
    }

    #[test]
    fn deterministic_under_seed() {
        let m = manifest(10, 5);
        assert_eq!(
            sample_episode(&m, &cfg(5, 2, 2), 9).unwrap(),
            sample_episode(&m, &cfg(5, 2, 2), 9).unwrap()
        );
        assert_ne!(
            sample_episode(&m, &cfg(5, 2, 2), 9).unwrap(),
            sample_episode(&m, &cfg(5, 2, 2), 10).unwrap()
        );
    }

    #[test]
    fn errors() {
        let m = manifest(3, 4);
        assert!(matches!(
            sample_episode(&m, &cfg(5, 1, 1), 0),
            Err(Error::InsufficientClasses {
                needed: 5,
                found: 3
            })
        ));
        assert!(matches!(
            sample_episode(&m, &cfg(3, 2, 3), 0),
            Err(Error::InsufficientClipsInClass { .. })
        ));
        let test = EpisodeConfig {
            split: Split::Test,
            ..cfg(2, 1, 1)
        };
        assert!(matches!(
            sample_episode(&m, &test, 0),
            Err(Error::InsufficientClasses { found: 0, .. })
        ));
    }

    #[test]
    fn class_usage_is_uniform() {
        let m = manifest(10, 2);
        let mut counts = BTreeMap::new();
        for s in 0..1000 {
            for c in sample_episode(&m, &cfg(5, 1, 1), derive_seed(77, s))
                .unwrap()
                .class_map
            {
                *counts.entry(c).or_insert(0usize) += 1;
            }
        }
        // Each class appears with probability 1/2 per episode.
        let sigma = (1000.0f64 * 0.5 * 0.5).sqrt();
        for (c, n) in counts {
            assert!((n as f64 - 500.0).abs() <= 3.0 * sigma, "{c}: {n}");
        }
    }

    #[test]
    fn label_mapping_is_not_constant() {
        let m = manifest(5, 2);
        let mut table = [[0usize; 5]; 5];
        let n = 500;
        for s in 0..n {
            let e = sample_episode(&m, &cfg(5, 1, 1), s).unwrap();
            for (label, class) in e.class_map.iter().enumerate() {
                let c = m.classes.iter().position(|x| x == class).unwrap();
                table[c][label] += 1;
            }
        }
        // Chi-square against the uniform table; a constant mapping scores 4·n·5.
        let expected = n as f64 / 5.0;
        let chi2: f64 = table
            .iter()
            .flatten()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 39.25, "chi2 {chi2}");
    }

    #[test]
    fn shift_definition() {
        let items = vec![("x0", 3), ("x1", 1), ("x2", 2)];
        let s = shift_labels(&items).unwrap();
        assert_eq!(
            s.inputs,
            vec![("x0", None), ("x1", Some(3)), ("x2", Some(1))]
        );
        assert_eq!(s.targets, vec![3, 1, 2]);
        assert_eq!(unshift_labels(&s), vec![3, 1]);
        let one = shift_labels(&[("x", 4)]).unwrap();
        assert_eq!(one.inputs, vec![("x", None)]);
        assert_eq!(one.targets, vec![4]);
        assert!(matches!(shift_labels::<u8>(&[]), Err(Error::EmptyEpisode)));
    }

    #[test]
    fn null_label_is_its_own_slot() {
        assert_eq!(label_onehot(None, 3), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(label_onehot(Some(1), 3), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(8, 3);
        let replay = EpisodeReplay {
            seed: 5,
            config: cfg(4, 1, 2),
            count: 6,
        };
        let path = dir.path().join("replay.json");
        replay.save(&path).unwrap();
        let back = EpisodeReplay::load(&path).unwrap();
        assert_eq!(back, replay);
        assert_eq!(back.episodes(&m).unwrap(), replay.episodes(&m).unwrap());
    }
}
