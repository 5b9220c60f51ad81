use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use tubelet_core::dataset::{
    build_dataset, split_by_class, ClipStore, DatasetManifest, DecodeSpec, SourceCollection, Split,
};
use tubelet_core::grid::{reconstruct_clip, save_grid};
use tubelet_core::model::Checkpoint;
use tubelet_core::synthetic::SyntheticSpec;
use tubelet_core::training::report::{summaries_to_csv, summaries_to_text};
use tubelet_core::training::{
    evaluate_classification, evaluate_mann, evaluate_reconstruction, partition, recon_table,
    run_stage, EvalResult, EvalSplit, MetricsLog, RunSummary, Stage, TrainConfig, Trained, PRESETS,
};

/// Small-scale video masked autoencoders and memory-augmented meta-learning.
#[derive(Parser, Debug)]
#[command(name = "tubelet", version)]
struct Cli {
    /// Dataset directory holding `manifest.jsonl` and `clips/`.
    #[arg(long, env = "TUBELET_DATA", default_value = "data", global = true)]
    data: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Transcode source collections (or generate a synthetic corpus) and split classes.
    BuildDataset(BuildArgs),
    /// Reconstruction pretraining of the masked autoencoder.
    Pretrain(RunArgs),
    /// Reconstruction fine-tuning or classifier training, as the preset selects.
    Train(RunArgs),
    /// Meta-train the memory network over episodes.
    MetaTrain(MetaArgs),
    /// Evaluate a checkpoint on a split.
    Evaluate(EvalArgs),
    /// Write the original / masked / reconstruction image grid of one clip.
    ReconstructGrid(GridArgs),
    /// Tabulate training logs and saved evaluation results.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Source collection roots; each holds an `annotations.csv` (`path,label[,clip_id]`).
    #[arg(long = "source")]
    sources: Vec<PathBuf>,
    /// Generate a synthetic moving-shape corpus with this many classes instead.
    #[arg(long, conflicts_with = "sources")]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 20)]
    clips_per_class: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Preset name or path to a flat key-value config file.
    #[arg(long)]
    preset: Option<String>,
    /// `key=value` config override; repeatable, later wins.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to initialize the backbone from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory receiving `{run_id}/epoch_N.ckpt`, `config` and `metrics`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MetaArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, val or test. Defaults to val, or test for memory networks,
    /// whose episodes draw on whole manifest splits (train or test).
    #[arg(long)]
    split: Option<String>,
    /// Episodes for memory-network evaluation (config value when omitted).
    #[arg(long)]
    episodes: Option<usize>,
    /// Mask ratio for reconstruction evaluation (config value when omitted).
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Also write the result as JSON for `report`.
    #[arg(long)]
    save: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    clip_id: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask_ratio: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Training metrics logs.
    #[arg(long)]
    metrics: Vec<PathBuf>,
    /// Results written by `evaluate --save`.
    #[arg(long)]
    eval: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

fn config_help() -> String {
    let mut s = String::from("Config keys (override with -o KEY=VALUE):\n");
    for (key, default) in TrainConfig::schema() {
        s += &format!("  {key:<22} default {default}\n");
    }
    s += &format!("Presets: {}\n", PRESETS.join(", "));
    s
}

fn parse_cli() -> Cli {
    let help = config_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in ["pretrain", "train", "meta-train"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let matches = cmd.get_matches();
    Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit())
}

fn main() -> ExitCode {
    let cli = parse_cli();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildDataset(a) => build(&cli.data, a),
        Command::Pretrain(a) => train(
            &cli.data,
            &a,
            &["stage=pretrain_reconstruction".into()],
            &[Stage::PretrainReconstruction],
        ),
        Command::Train(a) => train(
            &cli.data,
            &a,
            &[],
            &[Stage::FinetuneReconstruction, Stage::ScratchClassifier],
        ),
        Command::MetaTrain(a) => {
            let mut forced = vec!["stage=meta_mann".to_string()];
            forced.extend(a.ways.map(|w| format!("n_way={w}")));
            forced.extend(a.shots.map(|k| format!("k_shot={k}")));
            train(&cli.data, &a.run, &forced, &[Stage::MetaMann])
        }
        Command::Evaluate(a) => evaluate(&cli.data, a),
        Command::ReconstructGrid(a) => grid(&cli.data, a),
        Command::Report(a) => report(a),
    }
}

fn load_manifest(data: &Path) -> Result<(DatasetManifest, ClipStore)> {
    let manifest = DatasetManifest::read(&data.join("manifest.jsonl")).with_context(|| {
        format!(
            "reading the dataset at {} (set --data or TUBELET_DATA)",
            data.display()
        )
    })?;
    Ok((manifest, ClipStore::new(data.join("clips"))))
}

fn build(data: &Path, a: BuildArgs) -> Result<()> {
    let manifest = if let Some(classes) = a.synthetic {
        let spec = SyntheticSpec::new(classes, a.clips_per_class, a.seed);
        let manifest = split_by_class(&spec.manifest()?, a.train_fraction, a.seed)?;
        let store = ClipStore::new(data.join("clips"));
        for (c, i) in (0..classes).flat_map(|c| (0..a.clips_per_class).map(move |i| (c, i))) {
            store.save(&SyntheticSpec::clip_id(c, i), &spec.generate(c, i))?;
        }
        manifest.write(&data.join("manifest.jsonl"))?;
        manifest
    } else {
        if a.sources.is_empty() {
            bail!("give at least one --source or --synthetic");
        }
        let sources: Vec<SourceCollection> = a.sources.iter().map(SourceCollection::at).collect();
        build_dataset(
            &sources,
            data,
            DecodeSpec::default(),
            a.train_fraction,
            a.seed,
        )?
    };
    println!(
        "{} clips, {} train classes ({} clips), {} test classes ({} clips) -> {}",
        manifest.len(),
        manifest.classes_in(Split::Train).len(),
        manifest.clip_count(Split::Train),
        manifest.classes_in(Split::Test).len(),
        manifest.clip_count(Split::Test),
        data.join("manifest.jsonl").display()
    );
    Ok(())
}

fn train(data: &Path, a: &RunArgs, forced: &[String], allowed: &[Stage]) -> Result<()> {
    let mut overrides = forced.to_vec();
    overrides.extend(a.overrides.iter().cloned());
    overrides.extend(a.seed.map(|s| format!("seed={s}")));
    let cfg = TrainConfig::load(a.preset.as_deref(), &overrides)?;
    if !allowed.contains(&cfg.stage) {
        bail!(
            "stage {} cannot run under this subcommand",
            cfg.stage.as_str()
        );
    }
    let (manifest, store) = load_manifest(data)?;
    let ck = a.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let out = run_stage(&cfg, &manifest, &store, ck.as_ref(), Some(&a.out))?;
    let dir = out.run_dir.expect("output directory given");
    let summary = RunSummary::from_records(&dir.display().to_string(), &out.metrics.records)?;
    print!("{}", summaries_to_text(&[summary]));
    println!(
        "checkpoint {}",
        dir.join(format!("epoch_{}.ckpt", out.checkpoint.epoch))
            .display()
    );
    Ok(())
}

fn evaluate(data: &Path, a: EvalArgs) -> Result<()> {
    let trained = Trained::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let (manifest, store) = load_manifest(data)?;
    let default = if trained.mann.is_some() {
        "test"
    } else {
        "val"
    };
    let split: EvalSplit = a.split.as_deref().unwrap_or(default).parse()?;
    let result = if trained.mann.is_some() {
        let split = match split {
            EvalSplit::Test => Split::Test,
            EvalSplit::Train => Split::Train,
            EvalSplit::Val => bail!("episodes are drawn from the train or test split"),
        };
        let n = a.episodes.unwrap_or(trained.config.eval_episodes);
        EvalResult::Mann(evaluate_mann(
            &trained, &manifest, &store, split, n, a.seed,
        )?)
    } else if trained.model.head().is_some() {
        EvalResult::Classification(evaluate_classification(&trained, &manifest, &store, split)?)
    } else {
        let records = match split {
            EvalSplit::Test => manifest.records_in(Split::Test).cloned().collect(),
            EvalSplit::Train => partition(&manifest, &trained.config)?
                .train
                .into_iter()
                .map(|(r, _)| r)
                .collect(),
            EvalSplit::Val => partition(&manifest, &trained.config)?
                .val
                .into_iter()
                .map(|(r, _)| r)
                .collect::<Vec<_>>(),
        };
        let refs: Vec<_> = records.iter().collect();
        let ratio = a.mask_ratio.unwrap_or(trained.config.mask_ratio);
        let report = evaluate_reconstruction(&trained, &refs, &store, ratio, a.seed)?;
        let model = a
            .checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        EvalResult::Reconstruction { model, report }
    };
    match a.format {
        Format::Text => print!("{}", result.to_text()?),
        Format::Csv => print!("{}", result.to_csv()?),
    }
    if let Some(p) = &a.save {
        result.save(p)?;
    }
    Ok(())
}

fn grid(data: &Path, a: GridArgs) -> Result<()> {
    let trained = Trained::from_checkpoint(&Checkpoint::load(&a.checkpoint)?)?;
    let (manifest, store) = load_manifest(data)?;
    let record = manifest
        .records
        .iter()
        .find(|r| r.clip_id == a.clip_id)
        .ok_or_else(|| tubelet_core::Error::MissingClipFile(a.clip_id.clone().into()))?;
    let clip =
        tubelet_core::training::ClipLoader::new(&store, trained.config.input_dim).load(record)?;
    let ratio = a.mask_ratio.unwrap_or(trained.config.mask_ratio);
    let rows = reconstruct_clip(&trained, &clip, ratio, a.seed)?;
    save_grid(&rows, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    if a.metrics.is_empty() && a.eval.is_empty() {
        bail!("give --metrics and/or --eval files");
    }
    let mut out = String::new();
    if !a.metrics.is_empty() {
        let rows = a
            .metrics
            .iter()
            .map(|p| {
                RunSummary::from_records(&p.display().to_string(), &MetricsLog::read(p)?)
                    .map_err(Into::into)
            })
            .collect::<Result<Vec<_>>>()?;
        out += &match a.format {
            Format::Text => summaries_to_text(&rows),
            Format::Csv => summaries_to_csv(&rows),
        };
    }
    let results = a
        .eval
        .iter()
        .map(|p| EvalResult::load(p))
        .collect::<tubelet_core::Result<Vec<_>>>()?;
    let recon: Vec<_> = results
        .iter()
        .filter_map(|r| match r {
            EvalResult::Reconstruction { model, report } => Some((model.clone(), report.clone())),
            _ => None,
        })
        .collect();
    if !recon.is_empty() {
        let table = recon_table(&recon)?;
        out += &match a.format {
            Format::Text => table.to_text(),
            Format::Csv => table.to_csv(),
        };
    }
    for r in results
        .iter()
        .filter(|r| !matches!(r, EvalResult::Reconstruction { .. }))
    {
        out += &match a.format {
            Format::Text => r.to_text()?,
            Format::Csv => r.to_csv()?,
        };
    }
    print!("{out}");
    Ok(())
}
