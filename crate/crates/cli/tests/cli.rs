use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 9] = [
    "input_dim=16",
    "window=4",
    "embed_dim=16",
    "depth=1",
    "n_heads=2",
    "decoder_dim=8",
    "decoder_depth=1",
    "decoder_heads=2",
    "warmup_epochs=0",
];

fn tubelet(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubelet"))
        .env("TUBELET_DATA", data)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with_overrides<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for o in SMALL.iter().chain(extra) {
        args.extend(["-o", o]);
    }
    args
}

fn newest_ckpt(runs: &Path, stage: &str) -> std::path::PathBuf {
    let dir = std::fs::read_dir(runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(stage))
        .unwrap();
    assert!(dir.join("config").exists() && dir.join("metrics").exists());
    dir.join("epoch_1.ckpt")
}

#[test]
fn help_lists_every_config_key() {
    let text = ok(tubelet(Path::new("."), &["train", "--help"]));
    for (key, _) in tubelet_core::training::TrainConfig::schema() {
        assert!(text.contains(&format!("  {key} ")), "missing {key}");
    }
}

#[test]
fn dataset_train_evaluate_grid_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let runs_s = runs.to_str().unwrap();
    let built = ok(tubelet(
        &data,
        &[
            "build-dataset",
            "--synthetic",
            "6",
            "--clips-per-class",
            "3",
            "--train-fraction",
            "0.5",
            "--seed",
            "7",
        ],
    ));
    assert!(built.contains("3 train classes"), "{built}");
    let manifest = std::fs::read(data.join("manifest.jsonl")).unwrap();
    let again = tmp.path().join("again");
    ok(tubelet(
        &again,
        &[
            "build-dataset",
            "--synthetic",
            "6",
            "--clips-per-class",
            "3",
            "--train-fraction",
            "0.5",
            "--seed",
            "7",
        ],
    ));
    assert_eq!(
        std::fs::read(again.join("manifest.jsonl")).unwrap(),
        manifest
    );

    let args = with_overrides(
        vec!["train", "--preset", "table2_scratch", "--out", runs_s],
        &["epochs=1"],
    );
    ok(tubelet(&data, &args));
    let cls = newest_ckpt(&runs, "scratch_classifier");
    let eval_json = tmp.path().join("eval.json");
    let text = ok(tubelet(
        &data,
        &[
            "evaluate",
            "--checkpoint",
            cls.to_str().unwrap(),
            "--split",
            "train",
            "--save",
            eval_json.to_str().unwrap(),
        ],
    ));
    assert!(text.contains("top1"));

    let args = with_overrides(
        vec!["pretrain", "--out", runs_s],
        &["epochs=1", "mask_ratio=0.5"],
    );
    ok(tubelet(&data, &args));
    let rec = newest_ckpt(&runs, "pretrain_reconstruction");
    let png = tmp.path().join("grid.png");
    let clip = String::from_utf8(manifest)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split('"')
        .nth(3)
        .unwrap()
        .to_string();
    ok(tubelet(
        &data,
        &[
            "reconstruct-grid",
            "--checkpoint",
            rec.to_str().unwrap(),
            "--clip-id",
            &clip,
            "--out",
            png.to_str().unwrap(),
        ],
    ));
    let img = image::open(&png).unwrap();
    assert_eq!((img.width(), img.height()), (5 * 16, 3 * 16));
    let recon_json = tmp.path().join("recon.json");
    ok(tubelet(
        &data,
        &[
            "evaluate",
            "--checkpoint",
            rec.to_str().unwrap(),
            "--split",
            "test",
            "--save",
            recon_json.to_str().unwrap(),
        ],
    ));

    let args = with_overrides(
        vec![
            "meta-train",
            "--ways",
            "3",
            "--shots",
            "1",
            "--checkpoint",
            cls.to_str().unwrap(),
            "--out",
            runs_s,
        ],
        &[
            "epochs=1",
            "episodes_per_epoch=4",
            "eval_episodes=2",
            "batch_size=2",
            "q_queries=1",
        ],
    );
    ok(tubelet(&data, &args));
    let metrics = newest_ckpt(&runs, "meta_mann").with_file_name("metrics");

    let table = ok(tubelet(
        &data,
        &[
            "report",
            "--metrics",
            metrics.to_str().unwrap(),
            "--eval",
            recon_json.to_str().unwrap(),
            "--eval",
            eval_json.to_str().unwrap(),
            "--format",
            "csv",
        ],
    ));
    assert!(table.contains("meta_mann"));
    assert!(table.contains("model,frame20,frame40,frame60,frame80,frame100,overall"));
    assert!(table.contains("split,n,top1,top5,ce"));
}

#[test]
fn errors_exit_nonzero_with_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tubelet(
        tmp.path(),
        &[
            "build-dataset",
            "--source",
            tmp.path().join("missing").to_str().unwrap(),
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
    let out = tubelet(tmp.path(), &["train", "-o", "no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = tubelet(tmp.path(), &["meta-train", "-o", "warmup_epochs=0"]);
    assert!(!out.status.success());
}
