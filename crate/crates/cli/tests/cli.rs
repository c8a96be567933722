use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn smurf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smurf")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &str = r#"
batch_size = 32
samples = 12
render_samples = 16
checkpoint_every = 5

[field]
resolution = [16, 16, 16]
density_ranks = [2, 2, 2]
appearance_ranks = [2, 2, 2]
appearance_features = 4
hidden = 16
direction_octaves = 2

[cmbk]
warps = 4
latent_dim = 8
hidden = 8
view_embed_dim = 4
chrono_dim = 4
"#;

fn setup(root: &Path, interp: &str) {
    ok(&smurf(&["gen-data", "--preset", "tiny", "--interp", interp, "--out", "data"], root));
    fs::write(root.join("tiny.toml"), TINY).unwrap();
}

fn count(dir: &Path, prefix: &str) -> usize {
    fs::read_dir(dir).unwrap().flatten().filter(|e| e.file_name().to_string_lossy().starts_with(prefix)).count()
}

#[test]
fn gen_data_default_preset_writes_twenty_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&smurf(&["gen-data", "--preset", "default", "--out", "data/toy"], tmp.path()));
    assert!(stdout.contains("20 blurred views"));
    let dir = tmp.path().join("data/toy");
    assert_eq!(count(&dir, "blur_"), 20);
    assert_eq!(count(&dir, "sharp_"), 20);
    assert!(dir.join("manifest.json").is_file());
}

#[test]
fn gen_data_records_cubic_motion() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "cubic");
    let text = fs::read_to_string(tmp.path().join("data/manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_str(&text).unwrap();
    for view in manifest["views"].as_array().unwrap() {
        assert_eq!(view["trajectory"]["interpolation"], "cubic-hermite");
    }
}

#[test]
fn usage_errors_exit_one_without_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = smurf(&["gen-data", "--preset", "tiny"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
    let out = smurf(&["gen-data", "--preset", "bogus", "--out", "d"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!tmp.path().join("d").exists());
    assert_eq!(smurf(&["frobnicate"], tmp.path()).status.code(), Some(1));
    let out = smurf(&["train", "--data", "nowhere", "--out", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn train_writes_one_metrics_row_per_iteration_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "linear");
    ok(&smurf(&["train", "--data", "data", "--config", "tiny.toml", "--iters", "12", "--ablation", "no-residual", "--out", "run"], tmp.path()));
    let metrics = fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 12);
    assert!(metrics.starts_with("iteration,recon_loss,supp_loss,wall_time"));
    let echo = fs::read_to_string(tmp.path().join("run/config.toml")).unwrap();
    assert!(echo.contains("iterations = 12"));
    assert!(echo.contains("residual = false"));
    assert!(echo.contains("warps = 4"));

    fs::write(tmp.path().join("bad.toml"), "no_such_key = 3").unwrap();
    let out = smurf(&["train", "--data", "data", "--config", "bad.toml", "--out", "run2"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn same_seed_gives_the_same_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "linear");
    for run in ["a", "b", "c"] {
        let seed = if run == "c" { "1" } else { "7" };
        ok(&smurf(&["train", "--data", "data", "--config", "tiny.toml", "--iters", "6", "--seed", seed, "--out", run], tmp.path()));
    }
    let read = |r: &str| fs::read(tmp.path().join(r).join("checkpoint.bin")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn render_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "linear");
    ok(&smurf(&["train", "--data", "data", "--config", "tiny.toml", "--iters", "5", "--out", "run"], tmp.path()));
    ok(&smurf(&["render", "--checkpoint", "run", "--data", "data", "--out", "r1"], tmp.path()));
    ok(&smurf(&["render", "--checkpoint", "run/checkpoint.bin", "--data", "data", "--out", "r2"], tmp.path()));
    for i in 0..2 {
        let name = format!("test_{i:03}.png");
        assert_eq!(fs::read(tmp.path().join("r1").join(&name)).unwrap(), fs::read(tmp.path().join("r2").join(&name)).unwrap());
    }
    ok(&smurf(&["render", "--checkpoint", "run", "--data", "data", "--out", "r1"], tmp.path()));

    let stdout = ok(&smurf(&["eval", "--checkpoint", "run", "--data", "data", "--against", "r1", "--csv"], tmp.path()));
    let mut rows = csv::Reader::from_reader(stdout.as_bytes());
    let rows: Vec<csv::StringRecord> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2 + 1);
    assert_eq!(&rows[2][0], "mean");
    assert_eq!(rows[2][1].parse::<f64>().unwrap(), 99.0);

    let table = ok(&smurf(&["eval", "--checkpoint", "run", "--data", "data", "--csv", "scores.csv"], tmp.path()));
    assert!(table.lines().last().unwrap().starts_with("mean"));
    assert_eq!(fs::read_to_string(tmp.path().join("scores.csv")).unwrap().lines().count(), 1 + 2 + 1);

    let out = smurf(&["eval", "--checkpoint", "missing", "--data", "data"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = smurf(&["render", "--checkpoint", "run", "--data", "data", "--out", "data"], tmp.path());
    assert_ne!(out.status.code(), Some(0));
    assert!(tmp.path().join("data/manifest.json").is_file());
}

#[test]
fn inspect_kernel_of_a_fresh_checkpoint_is_the_identity() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "cubic");
    ok(&smurf(&["train", "--data", "data", "--config", "tiny.toml", "--iters", "0", "--out", "fresh"], tmp.path()));
    ok(&smurf(
        &["inspect-kernel", "--checkpoint", "fresh", "--data", "data", "--view", "1", "--pixel", "5.5", "7.5", "--out", "k.csv", "--overlay", "k.png"],
        tmp.path(),
    ));
    let text = fs::read_to_string(tmp.path().join("k.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), ["t", "p_x", "p_y", "do_x", "do_y", "do_z", "w"]);
    let rows: Vec<Vec<f64>> = reader.records().map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!((r[1], r[2]), (5.5, 7.5));
        assert_eq!(&r[3..6], &[0.0, 0.0, 0.0]);
        assert!((r[6] - 0.25).abs() < 1e-12);
    }
    assert!(tmp.path().join("k.png").is_file());

    let stdout = ok(&smurf(&["inspect-kernel", "--checkpoint", "fresh", "--data", "data", "--view", "0", "--pixel", "0.5", "0.5"], tmp.path()));
    assert_eq!(stdout.lines().count(), 1 + 4);
    let out = smurf(&["inspect-kernel", "--checkpoint", "fresh", "--data", "data", "--view", "0", "--pixel", "16.5", "3"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let out = smurf(&["inspect-kernel", "--checkpoint", "fresh", "--data", "data", "--view", "9", "--pixel", "1", "1"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn trained_kernel_on_curved_blur_is_not_collinear() {
    let tmp = tempfile::tempdir().unwrap();
    setup(tmp.path(), "cubic");
    fs::write(tmp.path().join("kernel.toml"), format!("lr_network = 0.01\n{TINY}")).unwrap();
    ok(&smurf(&["train", "--data", "data", "--config", "kernel.toml", "--iters", "40", "--out", "run"], tmp.path()));
    let text = ok(&smurf(&["inspect-kernel", "--checkpoint", "run", "--data", "data", "--view", "2", "--pixel", "8.5", "8.5"], tmp.path()));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let path: Vec<[f64; 2]> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            [r[1].parse().unwrap(), r[2].parse().unwrap()]
        })
        .collect();
    assert_eq!(path.len(), 4);
    assert!(smurf_core::scenegen::chord_deviation(&path) > 0.0, "{path:?}");
}
