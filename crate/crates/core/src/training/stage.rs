//! Stage dispatch, the step loops and the evaluators that need a model.

use std::cell::RefCell;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::{
    apply_random_erase, downsample, mixup_batch, one_hot, sample_training_window, smooth_labels,
    RandAugment,
};
use super::config::{Stage, TrainConfig};
use super::eval::{
    evaluate_reconstruction_with, ClassificationReport, MannReport, PresentationTally, ReconReport,
};
use super::metrics::{MetricRecord, MetricsLog, RecordKind};
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::{layer_scale, LrSchedule};
use crate::autodiff::{Gradients, Graph, Matrix};
use crate::dataset::{ClipRecord, ClipSource, ClipTensor, DatasetManifest, Split};
use crate::episodes::{sample_episode, EpisodeReplay};
use crate::error::{Error, Result};
use crate::mann::{argmax_rows, BackboneMode, MannNet};
use crate::masking::{sample_mask, MaskPlan};
use crate::model::{
    mse_masked_graph, restore_strict, squash, Checkpoint, ClassifierHead, MaeModel, Squash,
};
use crate::nn::Mode;
use crate::params::{ParamId, ParamStore};
use crate::rng::{derive_seed, seeded};
use crate::tokenizer::{patch_moments, patchify};

// Seed streams.
const S_PARTITION: u64 = 1;
const S_ORDER: u64 = 2;
const S_BATCH: u64 = 3;
const S_MASK: u64 = 4;
const S_MODEL: u64 = 5;
const S_MANN: u64 = 6;
const S_EPISODE: u64 = 7;
const S_EVAL_EPISODE: u64 = 8;
const S_EVAL_MASK: u64 = 9;

/// Budget for keeping downsampled clips resident between epochs.
const CACHE_BYTES: usize = 768 << 20;

/// Labeled training and held-out validation clips of the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub classes: Vec<String>,
    pub train: Vec<(ClipRecord, usize)>,
    pub val: Vec<(ClipRecord, usize)>,
}

/// Holds out `round(val_fraction · n)` clips of every class (at most `n − 1`).
pub fn partition(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<Partition> {
    let classes = manifest.classes_in(Split::Train);
    if classes.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, class) in classes.iter().enumerate() {
        let mut recs: Vec<&ClipRecord> = manifest
            .records_in(Split::Train)
            .filter(|r| &r.action_class == class)
            .collect();
        recs.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
        if cfg.max_clips_per_class > 0 {
            recs.truncate(cfg.max_clips_per_class);
        }
        recs.shuffle(&mut seeded(derive_seed(
            derive_seed(cfg.seed, S_PARTITION),
            label as u64,
        )));
        let n_val = ((cfg.val_fraction * recs.len() as f64).round() as usize)
            .min(recs.len().saturating_sub(1));
        val.extend(recs[..n_val].iter().map(|r| ((*r).clone(), label)));
        train.extend(recs[n_val..].iter().map(|r| ((*r).clone(), label)));
    }
    Ok(Partition {
        classes,
        train,
        val,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            _ => Err(Error::config(
                "split",
                format!("{s:?} is not one of train, val, test"),
            )),
        }
    }
}

/// Loads clips at the configured spatial size, caching them while the
/// budget allows.
pub struct ClipLoader<'a> {
    source: &'a dyn ClipSource,
    side: usize,
    cache: RefCell<HashMap<String, ClipTensor>>,
    bytes: RefCell<usize>,
}

impl<'a> ClipLoader<'a> {
    pub fn new(source: &'a dyn ClipSource, side: usize) -> Self {
        Self {
            source,
            side,
            cache: RefCell::default(),
            bytes: RefCell::new(0),
        }
    }

    pub fn load(&self, record: &ClipRecord) -> Result<ClipTensor> {
        if let Some(c) = self.cache.borrow().get(&record.clip_id) {
            return Ok(c.clone());
        }
        let clip = downsample(&self.source.load(record)?, self.side)?;
        let size = clip.frames.len() * 4;
        if *self.bytes.borrow() + size <= CACHE_BYTES {
            *self.bytes.borrow_mut() += size;
            self.cache
                .borrow_mut()
                .insert(record.clip_id.clone(), clip.clone());
        }
        Ok(clip)
    }

    /// Training (augmented, random start) or evaluation (centered) window.
    pub fn window(
        &self,
        record: &ClipRecord,
        cfg: &TrainConfig,
        train: bool,
        seed: u64,
    ) -> Result<ClipTensor> {
        let clip = self.load(record)?;
        let mut w = sample_training_window(
            &clip,
            cfg.sampling_rate,
            cfg.window,
            train,
            derive_seed(seed, 0),
        )?;
        if train {
            if let Some(policy) = &cfg.autoaugment_policy {
                w = RandAugment::parse(policy)?.apply(&w, derive_seed(seed, 1));
            }
            if cfg.random_erase {
                w = apply_random_erase(&w, cfg.random_erase_prob, derive_seed(seed, 2)).0;
            }
        }
        Ok(w)
    }
}

/// A model ready for evaluation, with its optional memory network.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: MaeModel,
    pub mann: Option<MannNet>,
    pub config: TrainConfig,
    /// Class names behind the classifier outputs.
    pub classes: Vec<String>,
}

impl Trained {
    pub fn to_checkpoint(&self, stage: Stage, epoch: usize, step: u64) -> Checkpoint {
        let extra = serde_json::json!({
            "train": self.config,
            "classes": self.classes,
            "mann_input_dim": self.mann.as_ref().map(|m| m.input_dim),
        });
        let mut ck = self.model.to_checkpoint(stage.as_str(), extra);
        ck.epoch = epoch;
        ck.step = step;
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = MaeModel::from_checkpoint(ck)?;
        let config: TrainConfig = ck.config_section("train")?.unwrap_or_default();
        let classes: Vec<String> = ck.config_section("classes")?.unwrap_or_default();
        let input_dim: Option<usize> = ck.config_section("mann_input_dim")?.flatten();
        let mann = match input_dim {
            Some(dim) if ck.arrays.keys().any(|k| k.starts_with("mann.")) => {
                let net = MannNet::new(&mut model.store, config.mann_config(), dim, 0)?;
                restore_strict(&mut model.store, &ck.arrays, "mann.")?;
                Some(net)
            }
            _ => None,
        };
        Ok(Self {
            model,
            mann,
            config,
            classes,
        })
    }
}

/// Everything a finished stage produces.
#[derive(Debug)]
pub struct RunOutput {
    pub trained: Trained,
    pub checkpoint: Checkpoint,
    pub metrics: MetricsLog,
    pub run_dir: Option<PathBuf>,
}

/// Gradient accumulation, clipping and the scheduled AdamW update.
struct Updater {
    opt: AdamW,
    sched: LrSchedule,
    ids: Vec<ParamId>,
    scales: Vec<f64>,
    accum: Vec<Option<Matrix>>,
    pending: usize,
    grad_accum: usize,
    grad_clip: Option<f64>,
    updates: usize,
}

impl Updater {
    fn new(
        cfg: &TrainConfig,
        store: &ParamStore,
        trainable: impl Fn(&str) -> bool,
        betas: (f64, f64),
        epochs: usize,
        batches_per_epoch: usize,
    ) -> Self {
        let ids: Vec<ParamId> = store
            .ids()
            .filter(|&id| trainable(store.name(id)))
            .collect();
        let depth = cfg.depth;
        let scales = ids
            .iter()
            .map(|&id| layer_scale(store.name(id), depth, cfg.layer_decay))
            .collect();
        let updates_per_epoch = batches_per_epoch.div_ceil(cfg.grad_accum).max(1);
        let warmup = cfg.warmup_epochs.min(epochs.saturating_sub(1));
        Self {
            opt: AdamW::new(betas, cfg.weight_decay),
            sched: LrSchedule::new(cfg.base_lr, warmup, epochs, updates_per_epoch),
            accum: vec![None; ids.len()],
            ids,
            scales,
            pending: 0,
            grad_accum: cfg.grad_accum,
            grad_clip: cfg.grad_clip,
            updates: 0,
        }
    }

    /// Adds one micro-batch worth of gradient.
    fn add(&mut self, grads: Gradients) {
        self.accumulate(grads);
        self.pending += 1;
    }

    fn accumulate(&mut self, grads: Gradients) {
        for (slot, &id) in self.accum.iter_mut().zip(&self.ids) {
            if let Some(g) = grads.param(id) {
                match slot {
                    Some(a) => *a += g,
                    None => *slot = Some(g.clone()),
                }
            }
        }
    }

    /// Applies the accumulated gradient when `grad_accum` micro-batches are
    /// in, or when `force` ends an epoch early. Returns the base rate used.
    fn maybe_step(&mut self, store: &mut ParamStore, force: bool) -> Option<f64> {
        if self.pending == 0 || (self.pending < self.grad_accum && !force) {
            return None;
        }
        let mut grads = std::mem::replace(&mut self.accum, vec![None; self.ids.len()]);
        let k = 1.0 / self.pending as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
        if let Some(c) = self.grad_clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = self.sched.lr_for_update(self.updates);
        let scale: HashMap<ParamId, f64> = self
            .ids
            .iter()
            .copied()
            .zip(self.scales.iter().copied())
            .collect();
        self.opt
            .step(store, &self.ids, &grads, |id| lr * scale[&id]);
        self.pending = 0;
        self.updates += 1;
        Some(lr)
    }
}

struct RunDir {
    dir: Option<PathBuf>,
}

impl RunDir {
    fn save_epoch(
        &self,
        trained: &Trained,
        stage: Stage,
        epoch: usize,
        step: u64,
    ) -> Result<Checkpoint> {
        let ck = trained.to_checkpoint(stage, epoch, step);
        if let Some(d) = &self.dir {
            ck.save(&d.join(format!("epoch_{epoch}.ckpt")))?;
        }
        Ok(ck)
    }
}

/// Default run directory name: stage plus a config-hash prefix.
pub fn run_id(cfg: &TrainConfig) -> String {
    format!("{}_{}", cfg.stage.as_str(), &cfg.hash()[..12])
}

/// Runs one training stage end to end.
///
/// With `out_dir`, writes `{out_dir}/{run_id}/epoch_{n}.ckpt`, `config` and
/// `metrics` (plus `episodes` for the meta stage).
pub fn run_stage(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    source: &dyn ClipSource,
    checkpoint_in: Option<&Checkpoint>,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let needs_ck = matches!(cfg.stage, Stage::FinetuneReconstruction | Stage::MetaMann);
    if needs_ck && checkpoint_in.is_none() {
        return Err(Error::MissingCheckpoint(cfg.stage.as_str().into()));
    }
    let run_dir = match out_dir {
        Some(o) => {
            let d = o.join(run_id(cfg));
            std::fs::create_dir_all(&d)?;
            cfg.save(&d.join("config"))?;
            Some(d)
        }
        None => None,
    };
    let mut log = MetricsLog::new(
        cfg.stage.as_str(),
        &cfg.hash(),
        cfg.normalized_loss,
        run_dir.as_ref().map(|d| d.join("metrics")).as_deref(),
    )?;
    let dirs = RunDir {
        dir: run_dir.clone(),
    };
    let loader = ClipLoader::new(source, cfg.input_dim);
    let (trained, checkpoint) = match cfg.stage {
        Stage::PretrainReconstruction | Stage::FinetuneReconstruction => {
            let part = partition(manifest, cfg)?;
            let mut trained = Trained {
                model: build_model(cfg, None)?,
                mann: None,
                config: cfg.clone(),
                classes: part.classes.clone(),
            };
            if let Some(ck) = checkpoint_in {
                trained.model.load_backbone(ck)?;
            }
            let ck = reconstruction_epochs(
                &mut trained,
                cfg,
                &part,
                &loader,
                cfg.epochs,
                cfg.mask_ratio,
                &mut log,
                &dirs,
                0,
            )?;
            (trained, ck)
        }
        Stage::ScratchClassifier => {
            let part = partition(manifest, cfg)?;
            if part.classes.len() < 2 {
                return Err(Error::TooFewClasses(part.classes.len()));
            }
            let mut trained = Trained {
                model: build_model(cfg, Some(part.classes.len()))?,
                mann: None,
                config: cfg.clone(),
                classes: part.classes.clone(),
            };
            if let Some(ck) = checkpoint_in {
                trained.model.load_backbone(ck)?;
            }
            let mut offset = 0;
            if cfg.pretrain_epochs > 0 {
                reconstruction_epochs(
                    &mut trained,
                    cfg,
                    &part,
                    &loader,
                    cfg.pretrain_epochs,
                    cfg.pretrain_mask_ratio,
                    &mut log,
                    &dirs,
                    0,
                )?;
                offset = cfg.pretrain_epochs;
            }
            let ck = classifier_epochs(&mut trained, cfg, &part, &loader, &mut log, &dirs, offset)?;
            (trained, ck)
        }
        Stage::MetaMann => {
            let ck_in = checkpoint_in.expect("checked above");
            let mut model = build_model(cfg, None)?;
            model.load_backbone(ck_in)?;
            let input_dim = cfg.embed_dim;
            let mann = MannNet::new(
                &mut model.store,
                cfg.mann_config(),
                input_dim,
                derive_seed(cfg.seed, S_MANN),
            )?;
            let mut trained = Trained {
                model,
                mann: Some(mann),
                config: cfg.clone(),
                classes: Vec::new(),
            };
            if let Some(d) = &run_dir {
                let replay = EpisodeReplay {
                    seed: derive_seed(cfg.seed, S_EPISODE),
                    config: cfg.episode_config(Split::Train),
                    count: cfg.epochs * cfg.episodes_per_epoch,
                };
                replay.save(&d.join("episodes"))?;
            }
            let ck = meta_epochs(&mut trained, cfg, manifest, &loader, &mut log, &dirs)?;
            (trained, ck)
        }
    };
    Ok(RunOutput {
        trained,
        checkpoint,
        metrics: log,
        run_dir,
    })
}

fn build_model(cfg: &TrainConfig, classes: Option<usize>) -> Result<MaeModel> {
    let mut mc = cfg.model_config();
    mc.head = classes.map(ClassifierHead::mean);
    MaeModel::new(mc, derive_seed(cfg.seed, S_MODEL))
}

fn batch_seed(cfg: &TrainConfig, epoch: usize, batch: usize) -> u64 {
    derive_seed(
        derive_seed(cfg.seed, S_BATCH),
        ((epoch as u64) << 32) | batch as u64,
    )
}

fn epoch_order(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(
        derive_seed(cfg.seed, S_ORDER),
        epoch as u64,
    )));
    order
}

/// Masking plan of clip `clip` at update `step`; fixed plans ignore the step.
fn plan_for(
    cfg: &TrainConfig,
    n_tokens: usize,
    ratio: f64,
    clip: usize,
    step: u64,
) -> Result<MaskPlan> {
    if ratio == 0.0 {
        return Ok(MaskPlan::full(n_tokens));
    }
    let stream = if cfg.fixed_masks {
        clip as u64
    } else {
        (step << 24) ^ clip as u64
    };
    sample_mask(
        n_tokens,
        ratio,
        derive_seed(derive_seed(cfg.seed, S_MASK), stream),
    )
}

/// Masked-MSE loss of a batch in one graph. Returns the per-clip mean loss
/// and, when training, the gradient of the configured objective.
fn reconstruction_step(
    model: &MaeModel,
    cfg: &TrainConfig,
    windows: &[ClipTensor],
    plans: &[MaskPlan],
    train: bool,
    seed: u64,
) -> Result<(f64, Option<Gradients>)> {
    let inputs = windows
        .iter()
        .zip(plans)
        .map(|(w, p)| model.prepare(w, p))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Matrix> = windows
        .iter()
        .map(|w| model.targets(w, cfg.norm_pix_loss))
        .collect::<Result<_>>()?;
    let views: Vec<_> = targets.iter().map(|t| t.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let mut g = Graph::new(&model.store);
    let mut rng = seeded(seed);
    let mut mode = if train {
        Mode::train(&mut rng)
    } else {
        Mode::eval()
    };
    let enc = model.encode(&mut g, &inputs, &mut mode, !train)?;
    let refs: Vec<&MaskPlan> = plans.iter().collect();
    let pred = model.decode(&mut g, &enc, &refs, !train)?;
    let loss = mse_masked_graph(&mut g, pred, stacked, &refs)?;
    let chosen = if cfg.normalized_loss {
        loss.normalized
    } else {
        loss.unnormalized
    };
    Ok((g.scalar(loss.normalized), train.then(|| g.backward(chosen))))
}

#[allow(clippy::too_many_arguments)]
fn reconstruction_epochs(
    trained: &mut Trained,
    cfg: &TrainConfig,
    part: &Partition,
    loader: &ClipLoader<'_>,
    epochs: usize,
    ratio: f64,
    log: &mut MetricsLog,
    dirs: &RunDir,
    epoch_offset: usize,
) -> Result<Checkpoint> {
    if part.train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let n_tokens = trained.model.n_tokens();
    let batches = part.train.len().div_ceil(cfg.batch_size);
    let mut up = Updater::new(
        cfg,
        &trained.model.store,
        |n| !n.starts_with("head."),
        (0.9, 0.95),
        epochs,
        batches,
    );
    let mut ck = trained.to_checkpoint(cfg.stage, epoch_offset, 0);
    for epoch in 0..epochs {
        let order = epoch_order(cfg, part.train.len(), epoch_offset + epoch);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seed = batch_seed(cfg, epoch_offset + epoch, b);
            let windows = chunk
                .iter()
                .enumerate()
                .map(|(i, &k)| {
                    loader.window(&part.train[k].0, cfg, true, derive_seed(seed, i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let step = up.updates as u64;
            let plans = chunk
                .iter()
                .map(|&k| plan_for(cfg, n_tokens, ratio, k, step))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = reconstruction_step(
                &trained.model,
                cfg,
                &windows,
                &plans,
                true,
                derive_seed(seed, 99),
            )?;
            up.add(grads.expect("train step"));
            let last = b + 1 == batches;
            if let Some(lr) = up.maybe_step(&mut trained.model.store, last) {
                let mut r = MetricRecord::new(
                    RecordKind::TrainStep,
                    epoch_offset + epoch + 1,
                    up.updates as u64,
                );
                r.train_loss = Some(loss);
                r.lr = Some(lr);
                log.push(r)?;
            }
        }
        let mut r = MetricRecord::new(
            RecordKind::Validation,
            epoch_offset + epoch + 1,
            up.updates as u64,
        );
        if !part.val.is_empty() {
            let mut total = 0.0;
            for (i, chunk) in part.val.chunks(cfg.batch_size.max(4)).enumerate() {
                let windows = chunk
                    .iter()
                    .map(|(rec, _)| loader.window(rec, cfg, false, 0))
                    .collect::<Result<Vec<_>>>()?;
                let plans = (0..chunk.len())
                    .map(|j| match ratio {
                        0.0 => Ok(MaskPlan::full(n_tokens)),
                        _ => sample_mask(
                            n_tokens,
                            ratio,
                            derive_seed(derive_seed(cfg.seed, S_EVAL_MASK), (i * 4096 + j) as u64),
                        ),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (loss, _) =
                    reconstruction_step(&trained.model, cfg, &windows, &plans, false, 0)?;
                total += loss * chunk.len() as f64;
            }
            r.val_loss = Some(total / part.val.len() as f64);
        }
        log.push(r)?;
        ck = dirs.save_epoch(
            trained,
            cfg.stage,
            epoch_offset + epoch + 1,
            up.updates as u64,
        )?;
    }
    Ok(ck)
}

fn classifier_epochs(
    trained: &mut Trained,
    cfg: &TrainConfig,
    part: &Partition,
    loader: &ClipLoader<'_>,
    log: &mut MetricsLog,
    dirs: &RunDir,
    epoch_offset: usize,
) -> Result<Checkpoint> {
    if part.train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let k = part.classes.len();
    let n_tokens = trained.model.n_tokens();
    let batches = part.train.len().div_ceil(cfg.batch_size);
    let mut up = Updater::new(
        cfg,
        &trained.model.store,
        |n| !n.starts_with("decoder."),
        (0.9, 0.999),
        cfg.epochs,
        batches,
    );
    let mut ck = trained.to_checkpoint(cfg.stage, epoch_offset, 0);
    for epoch in 0..cfg.epochs {
        let e = epoch_offset + epoch;
        let order = epoch_order(cfg, part.train.len(), e);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seed = batch_seed(cfg, e, b);
            let mut windows = chunk
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    loader.window(&part.train[j].0, cfg, true, derive_seed(seed, i as u64))
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&j| part.train[j].1).collect();
            let mut targets = one_hot(&labels, k);
            if cfg.label_smoothing > 0.0 {
                for mut row in targets.rows_mut() {
                    let s = smooth_labels(row.as_slice().expect("row-major"), cfg.label_smoothing);
                    row.assign(&ndarray::Array1::from(s));
                }
            }
            let mut rng = seeded(derive_seed(seed, 50));
            if cfg.mixup_prob > 0.0 && windows.len() >= 2 && rng.random::<f64>() < cfg.mixup_prob {
                let mixed =
                    mixup_batch(&windows, &targets, cfg.mixup_alpha, derive_seed(seed, 51))?;
                windows = mixed.clips;
                targets = mixed.labels;
            }
            let step = up.updates as u64;
            let plans = chunk
                .iter()
                .map(|&j| plan_for(cfg, n_tokens, cfg.mask_ratio, j, step))
                .collect::<Result<Vec<_>>>()?;
            let inputs = windows
                .iter()
                .zip(&plans)
                .map(|(w, p)| trained.model.prepare(w, p))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new(&trained.model.store);
            let mut drng = seeded(derive_seed(seed, 52));
            let mut mode = Mode::train(&mut drng);
            let enc = trained.model.encode(&mut g, &inputs, &mut mode, false)?;
            let logits = trained.model.classify(&mut g, &enc, false)?;
            let normalized = g.soft_cross_entropy(logits, targets);
            let chosen = if cfg.normalized_loss {
                normalized
            } else {
                g.scale(normalized, chunk.len() as f64)
            };
            let loss = g.scalar(normalized);
            let grads = g.backward(chosen);
            drop(g);
            up.add(grads);
            if let Some(lr) = up.maybe_step(&mut trained.model.store, b + 1 == batches) {
                let mut r = MetricRecord::new(RecordKind::TrainStep, e + 1, up.updates as u64);
                r.train_loss = Some(loss);
                r.lr = Some(lr);
                log.push(r)?;
            }
        }
        let mut r = MetricRecord::new(RecordKind::Validation, e + 1, up.updates as u64);
        if !part.val.is_empty() {
            let rep = classify_records(&trained.model, cfg, &part.val, loader, "val")?;
            r.val_loss = Some(rep.loss);
            r.top1 = Some(rep.top1);
            r.top5 = Some(rep.top5);
        }
        log.push(r)?;
        ck = dirs.save_epoch(trained, cfg.stage, e + 1, up.updates as u64)?;
    }
    Ok(ck)
}

/// Eval-mode logits of centered windows, in record order.
fn classify_records(
    model: &MaeModel,
    cfg: &TrainConfig,
    records: &[(ClipRecord, usize)],
    loader: &ClipLoader<'_>,
    split: &str,
) -> Result<ClassificationReport> {
    if records.is_empty() {
        return Err(Error::EmptySplit(split.into()));
    }
    let mut rows = Vec::with_capacity(records.len());
    for chunk in records.chunks(8) {
        let windows = chunk
            .iter()
            .map(|(r, _)| loader.window(r, cfg, false, 0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ClipTensor> = windows.iter().collect();
        rows.push(model.logits(&refs)?);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let logits = ndarray::concatenate(ndarray::Axis(0), &views)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let labels: Vec<usize> = records.iter().map(|(_, l)| *l).collect();
    ClassificationReport::from_logits(split, &logits, &labels)
}

/// Eval-mode pooled embeddings of centered windows, one row per record.
fn embed_records(
    model: &MaeModel,
    cfg: &TrainConfig,
    records: &[&ClipRecord],
    loader: &ClipLoader<'_>,
) -> Result<Matrix> {
    let mut rows = Vec::new();
    for chunk in records.chunks(8) {
        let windows = chunk
            .iter()
            .map(|r| loader.window(r, cfg, false, 0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ClipTensor> = windows.iter().collect();
        rows.push(model.embed_clips(&refs)?);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Frozen-backbone embedding table keyed by clip id.
fn embedding_table(
    model: &MaeModel,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    split: Split,
    loader: &ClipLoader<'_>,
) -> Result<HashMap<String, Matrix>> {
    let records: Vec<&ClipRecord> = manifest.records_in(split).collect();
    let emb = embed_records(model, cfg, &records, loader)?;
    Ok(records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (
                r.clip_id.clone(),
                emb.slice(ndarray::s![i..i + 1, ..]).to_owned(),
            )
        })
        .collect())
}

fn episode_matrix(table: &HashMap<String, Matrix>, seq: &[(ClipRecord, usize)]) -> Matrix {
    let views: Vec<_> = seq.iter().map(|(r, _)| table[&r.clip_id].view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

fn meta_epochs(
    trained: &mut Trained,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    loader: &ClipLoader<'_>,
    log: &mut MetricsLog,
    dirs: &RunDir,
) -> Result<Checkpoint> {
    let frozen = cfg.backbone_mode == BackboneMode::Frozen;
    let ep_cfg = cfg.episode_config(Split::Train);
    let train_table = if frozen {
        Some(embedding_table(
            &trained.model,
            cfg,
            manifest,
            Split::Train,
            loader,
        )?)
    } else {
        None
    };
    let trainable = |n: &str| {
        if frozen {
            n.starts_with("mann.")
        } else {
            n.starts_with("mann.") || n.starts_with("encoder.")
        }
    };
    let batches = cfg.episodes_per_epoch.div_ceil(cfg.batch_size);
    let mut up = Updater::new(
        cfg,
        &trained.model.store,
        trainable,
        (0.9, 0.999),
        cfg.epochs,
        batches,
    );
    let replay = EpisodeReplay {
        seed: derive_seed(cfg.seed, S_EPISODE),
        config: ep_cfg,
        count: cfg.epochs * cfg.episodes_per_epoch,
    };
    let mut ck = trained.to_checkpoint(cfg.stage, 0, 0);
    let mut episode_index = 0usize;
    for epoch in 0..cfg.epochs {
        for b in 0..batches {
            let in_batch = cfg
                .batch_size
                .min(cfg.episodes_per_epoch - b * cfg.batch_size);
            let mut loss_mean = 0.0;
            for _ in 0..in_batch {
                let episode =
                    sample_episode(manifest, &ep_cfg, replay.episode_seed(episode_index))?;
                episode_index += 1;
                let seq = episode.sequence();
                let targets: Vec<usize> = seq.iter().map(|(_, l)| *l).collect();
                let model = &trained.model;
                let mann = trained
                    .mann
                    .as_ref()
                    .expect("meta stage has a memory network");
                let mut g = Graph::new(&model.store);
                let emb = match &train_table {
                    Some(t) => g.constant(episode_matrix(t, &seq)),
                    None => {
                        let full = MaskPlan::full(model.n_tokens());
                        let windows = seq
                            .iter()
                            .enumerate()
                            .map(|(i, (r, _))| {
                                loader.window(
                                    r,
                                    cfg,
                                    true,
                                    derive_seed(replay.episode_seed(episode_index), i as u64),
                                )
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let inputs = windows
                            .iter()
                            .map(|w| model.prepare(w, &full))
                            .collect::<Result<Vec<_>>>()?;
                        let mut drng =
                            seeded(derive_seed(replay.episode_seed(episode_index), u64::MAX));
                        let mut mode = Mode::train(&mut drng);
                        let enc = model.encode(&mut g, &inputs, &mut mode, false)?;
                        model.pool(&mut g, &enc)
                    }
                };
                let out = mann.episode_forward(&mut g, emb, &targets, false)?;
                let scaled = g.scale(out.loss, 1.0 / in_batch as f64);
                let chosen = if cfg.normalized_loss {
                    scaled
                } else {
                    out.loss
                };
                loss_mean += g.scalar(out.loss) / in_batch as f64;
                let grads = g.backward(chosen);
                drop(g);
                up.accumulate(grads);
            }
            up.pending += 1;
            if let Some(lr) = up.maybe_step(&mut trained.model.store, b + 1 == batches) {
                let mut r = MetricRecord::new(RecordKind::TrainStep, epoch + 1, up.updates as u64);
                r.train_loss = Some(loss_mean);
                r.lr = Some(lr);
                log.push(r)?;
            }
        }
        let mut r = MetricRecord::new(RecordKind::Validation, epoch + 1, up.updates as u64);
        if cfg.eval_episodes > 0 {
            let rep = evaluate_mann_with(
                trained,
                cfg,
                manifest,
                loader,
                Split::Test,
                cfg.eval_episodes,
                derive_seed(cfg.seed, S_EVAL_EPISODE),
            )?;
            r.val_loss = Some(rep.loss);
            r.query_accuracy = Some(rep.query_accuracy);
            r.first_presentation_accuracy = Some(rep.first_presentation);
            r.second_presentation_accuracy = Some(rep.second_presentation);
        }
        log.push(r)?;
        ck = dirs.save_epoch(trained, cfg.stage, epoch + 1, up.updates as u64)?;
    }
    Ok(ck)
}

fn evaluate_mann_with(
    trained: &Trained,
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    loader: &ClipLoader<'_>,
    split: Split,
    episodes: usize,
    seed: u64,
) -> Result<MannReport> {
    let mann = trained
        .mann
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("checkpoint has no memory network".into()))?;
    if manifest.clip_count(split) == 0 {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let table = embedding_table(&trained.model, cfg, manifest, split, loader)?;
    let ep_cfg = cfg.eval_episode_config(split);
    let mut tally = PresentationTally::default();
    for i in 0..episodes {
        let episode = sample_episode(manifest, &ep_cfg, derive_seed(seed, i as u64))?;
        let seq = episode.sequence();
        let targets: Vec<usize> = seq.iter().map(|(_, l)| *l).collect();
        let mut g = Graph::new(&trained.model.store);
        let emb = g.constant(episode_matrix(&table, &seq));
        let out = mann.episode_forward(&mut g, emb, &targets, false)?;
        // Labels beyond the episode's way count never occur; rank only live ones.
        let live = g
            .value(out.logits)
            .slice(ndarray::s![.., ..episode.n_way()])
            .to_owned();
        let preds = argmax_rows(&live);
        tally.add(&targets, &preds, episode.support.len(), g.scalar(out.loss));
    }
    Ok(tally.report())
}

/// Query and per-presentation accuracy over `episodes` fresh episodes.
pub fn evaluate_mann(
    trained: &Trained,
    manifest: &DatasetManifest,
    source: &dyn ClipSource,
    split: Split,
    episodes: usize,
    seed: u64,
) -> Result<MannReport> {
    let cfg = &trained.config;
    evaluate_mann_with(
        trained,
        cfg,
        manifest,
        &ClipLoader::new(source, cfg.input_dim),
        split,
        episodes,
        seed,
    )
}

/// Records of an evaluation split, labeled by the model's class list.
pub fn eval_records(
    trained: &Trained,
    manifest: &DatasetManifest,
    split: EvalSplit,
) -> Result<Vec<(ClipRecord, usize)>> {
    match split {
        EvalSplit::Train | EvalSplit::Val => {
            let part = partition(manifest, &trained.config)?;
            if part.classes != trained.classes {
                return Err(Error::config(
                    "classes",
                    "manifest train classes differ from the checkpoint's",
                ));
            }
            Ok(if split == EvalSplit::Train {
                part.train
            } else {
                part.val
            })
        }
        EvalSplit::Test => manifest
            .records_in(Split::Test)
            .map(
                |r| match trained.classes.iter().position(|c| c == &r.action_class) {
                    Some(l) => Ok((r.clone(), l)),
                    None => Err(Error::config(
                        "split",
                        format!("test class {} is unknown to the classifier", r.action_class),
                    )),
                },
            )
            .collect(),
    }
}

/// Top-1/top-5 accuracy and cross-entropy on centered windows.
pub fn evaluate_classification(
    trained: &Trained,
    manifest: &DatasetManifest,
    source: &dyn ClipSource,
    split: EvalSplit,
) -> Result<ClassificationReport> {
    let records = eval_records(trained, manifest, split)?;
    let name = format!("{split:?}").to_lowercase();
    let cfg = &trained.config;
    classify_records(
        &trained.model,
        cfg,
        &records,
        &ClipLoader::new(source, cfg.input_dim),
        &name,
    )
}

/// Decoder output mapped back to pixel probabilities: undoes per-patch
/// normalization when the model was trained on normalized targets, then
/// squashes into `[0, 1]`.
pub fn reconstruct_pixels(
    model: &MaeModel,
    window: &ClipTensor,
    plan: &MaskPlan,
    norm_pix: bool,
    how: Squash,
) -> Result<Matrix> {
    let mut raw = model.reconstruct(window, plan)?;
    if norm_pix {
        let (target, _) = patchify(window, &model.cfg.encoder.patch)?;
        for (mut row, (mean, std)) in raw.rows_mut().into_iter().zip(patch_moments(&target)) {
            row.mapv_inplace(|v| v * std + mean);
        }
    }
    Ok(squash(&raw, how))
}

/// Per-frame BCE over whole clips, tiled with the model's window at stride 1.
pub fn evaluate_reconstruction(
    trained: &Trained,
    records: &[&ClipRecord],
    source: &dyn ClipSource,
    mask_ratio: f64,
    seed: u64,
) -> Result<ReconReport> {
    if records.is_empty() {
        return Err(Error::EmptySplit("no clips to reconstruct".into()));
    }
    let loader = ClipLoader::new(source, trained.config.input_dim);
    let clips = records
        .iter()
        .map(|r| loader.load(r))
        .collect::<Result<Vec<_>>>()?;
    let model = &trained.model;
    let window = model.cfg.input.frames;
    evaluate_reconstruction_with(
        &clips,
        window,
        &model.cfg.encoder.patch,
        |c, w, n| {
            if mask_ratio == 0.0 {
                Ok(MaskPlan::full(n))
            } else {
                sample_mask(
                    n,
                    mask_ratio,
                    derive_seed(seed, ((c as u64) << 16) | w as u64),
                )
            }
        },
        |win, plan| {
            reconstruct_pixels(
                model,
                win,
                plan,
                trained.config.norm_pix_loss,
                Squash::Clamp,
            )
        },
    )
}
