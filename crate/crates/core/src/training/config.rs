use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Split;
use crate::dataset::{CLIP_FRAMES, CLIP_SIZE};
use crate::episodes::EpisodeConfig;
use crate::error::{Error, Result};
use crate::mann::{BackboneMode, MANNConfig};
use crate::model::{InputGeometry, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainReconstruction,
    FinetuneReconstruction,
    ScratchClassifier,
    MetaMann,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::PretrainReconstruction => "pretrain_reconstruction",
            Stage::FinetuneReconstruction => "finetune_reconstruction",
            Stage::ScratchClassifier => "scratch_classifier",
            Stage::MetaMann => "meta_mann",
        }
    }

    pub fn is_reconstruction(self) -> bool {
        matches!(
            self,
            Stage::PretrainReconstruction | Stage::FinetuneReconstruction
        )
    }
}

/// `Option` fields are written as the string `"none"` because the flat
/// key-value format has no null.
mod none_or {
    use serde::{Deserialize, Deserializer, Serializer};

    fn is_none(t: &str) -> bool {
        t.eq_ignore_ascii_case("none") || t.eq_ignore_ascii_case("false")
    }

    pub mod number {
        use super::*;

        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(v) => s.serialize_f64(*v),
                None => s.serialize_str("none"),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            match Raw::deserialize(d)? {
                Raw::Number(v) => Ok(Some(v)),
                Raw::Text(t) if is_none(&t) => Ok(None),
                Raw::Text(t) => Err(serde::de::Error::custom(format!(
                    "expected a number or \"none\", got {t:?}"
                ))),
            }
        }
    }

    pub mod text {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<String>, s: S) -> Result<S::Ok, S::Error> {
            s.serialize_str(v.as_deref().unwrap_or("none"))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
            let t = String::deserialize(d)?;
            Ok((!is_none(&t)).then_some(t))
        }
    }
}

/// Every knob of a training run. The flat field list is the schema of the
/// preset files and of `key=value` overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Spatial side of the frames fed to the model; must divide the stored 64.
    pub input_dim: usize,
    pub sampling_rate: usize,
    /// Frames per training window.
    pub window: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub layer_decay: f64,
    pub drop_path: f64,
    pub dropout: f64,
    pub mixup_alpha: f64,
    /// Probability that a batch is mixed.
    pub mixup_prob: f64,
    pub label_smoothing: f64,
    pub random_erase: bool,
    pub random_erase_prob: f64,
    #[serde(with = "none_or::text")]
    pub autoaugment_policy: Option<String>,
    pub mask_ratio: f64,
    /// Reuse one mask per clip for the whole run instead of resampling per step.
    pub fixed_masks: bool,
    pub norm_pix_loss: bool,
    /// Average the loss over the batch; `false` reproduces the batch-sum convention.
    pub normalized_loss: bool,
    pub grad_accum: usize,
    #[serde(with = "none_or::number")]
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Per-class fraction of training clips held out for validation.
    pub val_fraction: f64,
    /// Reconstruction epochs run before a classifier stage (0 = none).
    pub pretrain_epochs: usize,
    /// Masking ratio of those reconstruction epochs.
    pub pretrain_mask_ratio: f64,
    /// Cap on clips per class drawn from the manifest (0 = all).
    pub max_clips_per_class: usize,

    pub patch_size: usize,
    pub tubelet_size: usize,
    pub use_spt: bool,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,

    pub memory_slots: usize,
    pub key_dim: usize,
    pub n_reads: usize,
    pub controller_hidden: usize,
    pub usage_decay: f64,
    pub backbone_mode: BackboneMode,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    /// Classes per evaluation episode (0 = `n_way`); may be below `n_way`
    /// when the held-out split has fewer classes.
    pub eval_n_way: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::ScratchClassifier,
            input_dim: 64,
            sampling_rate: 4,
            window: 16,
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 4,
            base_lr: 0.001,
            weight_decay: 0.05,
            layer_decay: 1.0,
            drop_path: 0.0,
            dropout: 0.0,
            mixup_alpha: 0.0,
            mixup_prob: 0.0,
            label_smoothing: 0.0,
            random_erase: false,
            random_erase_prob: 0.0,
            autoaugment_policy: None,
            mask_ratio: 0.0,
            fixed_masks: false,
            norm_pix_loss: false,
            normalized_loss: true,
            grad_accum: 1,
            grad_clip: None,
            seed: 0,
            val_fraction: 0.1,
            pretrain_epochs: 0,
            pretrain_mask_ratio: 0.9,
            max_clips_per_class: 0,
            patch_size: 8,
            tubelet_size: 2,
            use_spt: true,
            embed_dim: 128,
            depth: 6,
            n_heads: 4,
            mlp_ratio: 4.0,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            memory_slots: 128,
            key_dim: 40,
            n_reads: 4,
            controller_hidden: 200,
            usage_decay: 0.95,
            backbone_mode: BackboneMode::Frozen,
            n_way: 5,
            k_shot: 1,
            q_queries: 15,
            episodes_per_epoch: 100,
            eval_episodes: 100,
            eval_n_way: 0,
        }
    }
}

/// Names of the shipped presets.
pub const PRESETS: [&str; 3] = ["table1_finetune", "table2_scratch", "best_spt_recipe"];

pub fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "table1_finetune" => Some(include_str!("../../presets/table1_finetune")),
        "table2_scratch" => Some(include_str!("../../presets/table2_scratch")),
        "best_spt_recipe" => Some(include_str!("../../presets/best_spt_recipe")),
        _ => None,
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::format(origin, e))
}

/// Parses the right-hand side of an override: a TOML scalar when it parses
/// as one, a bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl TrainConfig {
    /// Default table serialized in the flat format.
    fn default_table() -> toml::Table {
        toml::Table::try_from(TrainConfig::default()).expect("default config serializes")
    }

    /// Every accepted key with its default value, in schema order.
    pub fn schema() -> Vec<(String, String)> {
        let text = toml::to_string(&TrainConfig::default()).expect("default config serializes");
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect()
    }

    /// Defaults, then `layers` applied in order. Unknown keys and values of the
    /// wrong type are rejected with the offending key.
    fn from_layers(layers: &[toml::Table]) -> Result<Self> {
        let mut table = Self::default_table();
        for layer in layers {
            for (key, value) in layer {
                let Some(slot) = table.get_mut(key) else {
                    return Err(Error::config(key.clone(), "unknown key"));
                };
                *slot = value.clone();
            }
        }
        // Deserialize field by field first so a type error names its key.
        for (key, value) in &table {
            let mut single = Self::default_table();
            single.insert(key.clone(), value.clone());
            if let Err(e) = TrainConfig::deserialize(toml::Value::Table(single)) {
                return Err(Error::config(key.clone(), e.to_string()));
            }
        }
        let cfg = TrainConfig::deserialize(toml::Value::Table(table))
            .map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::load(Some(name), &[])
    }

    /// Effective config from an optional preset (a shipped name or a file
    /// path) plus `key=value` overrides.
    pub fn load(preset: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut layers = Vec::new();
        if let Some(p) = preset {
            let table = match preset_text(p) {
                Some(text) => parse_table(text, p)?,
                None => {
                    let path = Path::new(p);
                    if !path.is_file() {
                        return Err(Error::config(
                            "preset",
                            format!("no shipped preset or file named {p:?}"),
                        ));
                    }
                    parse_table(&std::fs::read_to_string(path)?, p)?
                }
            };
            layers.push(table);
        }
        let mut over = toml::Table::new();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.clone(), "override must look like key=value"))?;
            over.insert(k.trim().to_string(), parse_value(v));
        }
        layers.push(over);
        Self::from_layers(&layers)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_layers(&[parse_table(text, "config")?])
    }

    /// Flat key-value text of the full effective config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the effective config text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::config(key, reason));
        if self.warmup_epochs >= self.epochs.max(1)
            && !(self.epochs == 0 && self.warmup_epochs == 0)
        {
            return bad(
                "warmup_epochs",
                format!(
                    "{} must be below epochs {}",
                    self.warmup_epochs, self.epochs
                ),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(
                "label_smoothing",
                format!("{} outside [0, 1)", self.label_smoothing),
            );
        }
        for (key, r) in [
            ("mask_ratio", self.mask_ratio),
            ("pretrain_mask_ratio", self.pretrain_mask_ratio),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(key, format!("{r} outside [0, 1)"));
            }
        }
        if self.eval_n_way > self.n_way || self.eval_n_way == 1 {
            return bad(
                "eval_n_way",
                format!("{} must be 0 or in [2, n_way]", self.eval_n_way),
            );
        }
        for (key, p) in [
            ("mixup_prob", self.mixup_prob),
            ("random_erase_prob", self.random_erase_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(key, format!("{p} outside [0, 1]"));
            }
        }
        if self.mixup_prob > 0.0 && self.mixup_alpha <= 0.0 {
            return bad(
                "mixup_alpha",
                "must be positive when mixup is enabled".into(),
            );
        }
        if self.input_dim == 0 || !CLIP_SIZE.is_multiple_of(self.input_dim) {
            return bad(
                "input_dim",
                format!(
                    "{} must divide the stored frame size {CLIP_SIZE}",
                    self.input_dim
                ),
            );
        }
        if self.sampling_rate == 0
            || self.window == 0
            || self.window * self.sampling_rate > CLIP_FRAMES
        {
            return bad(
                "window",
                format!(
                    "{} frames at stride {} exceed {CLIP_FRAMES}",
                    self.window, self.sampling_rate
                ),
            );
        }
        if self.grad_accum == 0 {
            return bad("grad_accum", "must be at least 1".into());
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0) {
            return bad("grad_clip", "must be positive or none".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(
                "val_fraction",
                format!("{} outside [0, 1)", self.val_fraction),
            );
        }
        if !(0.0 < self.layer_decay && self.layer_decay <= 1.0) {
            return bad(
                "layer_decay",
                format!("{} outside (0, 1]", self.layer_decay),
            );
        }
        if let Some(p) = &self.autoaugment_policy {
            super::augment::RandAugment::parse(p)
                .map_err(|e| Error::config("autoaugment_policy", e.to_string()))?;
        }
        self.model_config()
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        if self.stage == Stage::MetaMann {
            self.mann_config()
                .validate()
                .map_err(|e| Error::config("mann", e.to_string()))?;
            self.episode_config(Split::Train)
                .validate()
                .map_err(|e| Error::config("n_way", e.to_string()))?;
        }
        Ok(())
    }

    pub fn geometry(&self) -> InputGeometry {
        InputGeometry {
            frames: self.window,
            height: self.input_dim,
            width: self.input_dim,
            channels: 3,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::build(
            self.geometry(),
            self.patch_size,
            self.tubelet_size,
            self.use_spt,
            self.embed_dim,
            self.depth,
            self.n_heads,
            self.decoder_dim,
            self.decoder_depth,
            self.decoder_heads,
        );
        cfg.encoder.mlp_ratio = self.mlp_ratio;
        cfg.encoder.drop_path_rate = self.drop_path;
        cfg.encoder.dropout = self.dropout;
        cfg
    }

    pub fn mann_config(&self) -> MANNConfig {
        MANNConfig {
            memory_slots: self.memory_slots,
            key_dim: self.key_dim,
            n_reads: self.n_reads,
            controller_hidden: self.controller_hidden,
            usage_decay: self.usage_decay,
            backbone_mode: self.backbone_mode,
            n_way: self.n_way,
        }
    }

    pub fn episode_config(&self, split: Split) -> EpisodeConfig {
        EpisodeConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_queries: self.q_queries,
            split,
        }
    }

    pub fn eval_episode_config(&self, split: Split) -> EpisodeConfig {
        let n_way = if self.eval_n_way == 0 {
            self.n_way
        } else {
            self.eval_n_way
        };
        EpisodeConfig {
            n_way,
            ..self.episode_config(split)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(cfg.to_toml().contains("grad_clip = \"none\""));
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = TrainConfig::load(
            Some("table2_scratch"),
            &["epochs=1".into(), "warmup_epochs=0".into()],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 1);
        assert_eq!(cfg.warmup_epochs, 0);
        assert_eq!(cfg.base_lr, 0.001);
        let cfg = TrainConfig::load(
            None,
            &[
                "grad_clip=1.5".into(),
                "autoaugment_policy=rand-m9-n1".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.grad_clip, Some(1.5));
        assert_eq!(cfg.autoaugment_policy.as_deref(), Some("rand-m9-n1"));
    }

    #[test]
    fn unknown_and_mistyped_keys_name_the_key() {
        let err = TrainConfig::load(None, &["learning_rate=0.1".into()]).unwrap_err();
        assert!(
            matches!(err, Error::ConfigMismatch { ref key, .. } if key == "learning_rate"),
            "{err}"
        );
        let err = TrainConfig::load(None, &["epochs=many".into()]).unwrap_err();
        assert!(
            matches!(err, Error::ConfigMismatch { ref key, .. } if key == "epochs"),
            "{err}"
        );
        let err = TrainConfig::load(None, &["epochs".into()]).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch { .. }));
    }

    #[test]
    fn invariants_are_enforced() {
        for o in [
            "warmup_epochs=50",
            "batch_size=0",
            "label_smoothing=1.0",
            "mask_ratio=1.0",
            "input_dim=48",
        ] {
            assert!(
                matches!(
                    TrainConfig::load(None, &[o.into()]),
                    Err(Error::ConfigMismatch { .. })
                ),
                "{o}"
            );
        }
    }

    #[test]
    fn hash_tracks_every_value() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.label_smoothing = 0.1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn schema_lists_every_field() {
        let keys: Vec<String> = TrainConfig::schema().into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys.len(), TrainConfig::default_table().len());
        assert!(keys.iter().any(|k| k == "autoaugment_policy"));
    }
}
