use tubelet_core::synthetic::SyntheticSpec;
use tubelet_core::training::{evaluate_reconstruction, run_stage, Stage, TrainConfig};

fn tiny(stage: Stage) -> TrainConfig {
    TrainConfig {
        stage,
        input_dim: 16,
        window: 4,
        sampling_rate: 4,
        patch_size: 8,
        tubelet_size: 2,
        embed_dim: 16,
        depth: 1,
        n_heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn scratch_classifier_runs_and_persists() {
    let spec = SyntheticSpec::new(3, 4, 0);
    let manifest = spec.manifest().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run_stage(
        &tiny(Stage::ScratchClassifier),
        &manifest,
        &spec,
        None,
        Some(dir.path()),
    )
    .unwrap();
    let run = out.run_dir.unwrap();
    assert!(run.join("epoch_2.ckpt").exists());
    assert!(run.join("metrics").exists());
}

#[test]
fn meta_stage_requires_a_backbone() {
    let spec = SyntheticSpec::new(3, 4, 0);
    let manifest = spec.manifest().unwrap();
    let err = run_stage(&tiny(Stage::MetaMann), &manifest, &spec, None, None).unwrap_err();
    assert!(
        matches!(err, tubelet_core::Error::MissingCheckpoint(_)),
        "{err}"
    );
}

#[test]
fn pretrained_weights_carry_into_finetuning() {
    let spec = SyntheticSpec::new(2, 3, 1);
    let manifest = spec.manifest().unwrap();
    let pre = TrainConfig {
        mask_ratio: 0.75,
        ..tiny(Stage::PretrainReconstruction)
    };
    let first = run_stage(&pre, &manifest, &spec, None, None).unwrap();
    let fine = TrainConfig {
        mask_ratio: 0.75,
        epochs: 2,
        ..tiny(Stage::FinetuneReconstruction)
    };
    let second = run_stage(&fine, &manifest, &spec, Some(&first.checkpoint), None).unwrap();
    let records: Vec<_> = manifest.records.iter().collect();
    let report = evaluate_reconstruction(&second.trained, &records, &spec, 0.75, 3).unwrap();
    assert_eq!(report.clips, records.len());
    assert_eq!(report.per_frame.len(), 100);
    assert!(report.overall.is_finite() && report.overall > 0.0);
    let mean = report.per_frame.iter().sum::<f64>() / 100.0;
    assert!((mean - report.overall).abs() < 1e-9);
}
