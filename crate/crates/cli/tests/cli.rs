use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset]
width = 32
height = 24
n_train = 3
n_test = 1

[model]
embedding_dim = 4
hidden = [16]

[model.grid]
levels = 4
table_size = 4096
base_resolution = 4
growth_factor = 2.0

[train]
total_iters = 30
cell_size = 4

[train.fit]
iters = 10
"#;

fn dam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dam")).args(args).output().expect("spawn dam")
}

fn ok(args: &[&str]) -> Output {
    let out = dam(args);
    assert!(out.status.success(), "dam {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    ok(&["generate", "--config", s(&config), "--out", s(&data), "--seed", "3"]);
    Fixture { _dir: dir, root, config, data }
}

#[test]
fn generate_writes_manifest_and_images_reproducibly() {
    let f = fixture();
    let manifest = fs::read_to_string(f.data.join("manifest.json")).unwrap();
    for v in 0..4 {
        for suffix in ["rendered.pfm", "rendered.png", "depth.pfm", "camera.json", "gt.pfm", "gt.png"] {
            assert!(f.data.join(format!("view_{v:03}_{suffix}")).exists(), "{v} {suffix}");
        }
    }
    let again = f.root.join("again");
    ok(&["generate", "--config", s(&f.config), "--out", s(&again), "--seed", "3"]);
    assert_eq!(fs::read_to_string(again.join("manifest.json")).unwrap(), manifest);
    assert_eq!(fs::read(again.join("view_001_gt.pfm")).unwrap(), fs::read(f.data.join("view_001_gt.pfm")).unwrap());
}

#[test]
fn invalid_output_directory_fails_without_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    fs::write(&file, "x").unwrap();
    let out = dam(&["generate", "--out", s(&file.join("sub")), "--width", "8", "--height", "8"]);
    assert!(!out.status.success());
    assert!(!file.join("sub").join("manifest.json").exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn missing_dataset_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dam(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("loading dataset"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = dam(&["generate", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert!(!out.status.success());
}

fn loss_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn train_then_eval_and_resume() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run)]);
    let rows = loss_rows(&run.join("losses.csv"));
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| r.len() == 6));
    assert!(run.join("checkpoint.bin").exists() && run.join("config.resolved.json").exists());

    let ev = f.root.join("eval");
    ok(&["eval", "--data", s(&f.data), "--run", s(&run), "--out", s(&ev)]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("view_id,psnr,ssim,psnr_cc,ssim_cc\n"));
    assert_eq!(csv.lines().count(), 2);
    assert!(ev.join("view_002_output.png").exists() && ev.join("view_002_raw.png").exists());
    let fit = fs::read_to_string(ev.join("fit_losses.csv")).unwrap();
    assert_eq!(fit.lines().count(), 11);
    let ev2 = f.root.join("eval2");
    ok(&["eval", "--data", s(&f.data), "--run", s(&run), "--out", s(&ev2), "--threads", "3"]);
    assert_eq!(fs::read(ev2.join("metrics.csv")).unwrap(), csv.as_bytes());

    // 15 iterations, then resume to the configured 30
    let half = f.root.join("half");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&half), "--iters", "15"]);
    let first = loss_rows(&half.join("losses.csv"));
    let ck = half.join("checkpoint.bin");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&half), "--resume", s(&ck)]);
    let resumed = loss_rows(&half.join("losses.csv"));
    assert_eq!(resumed.len(), 30);
    assert_eq!(resumed[..15], first[..]);
    for (a, b) in resumed[15..].iter().zip(&rows[15..]) {
        assert_eq!(a[0], b[0]);
        assert_eq!(a[4], b[4], "lambda2 at iteration {}", a[0]);
    }
}

#[test]
fn resume_rejects_mismatched_model() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run), "--iters", "2"]);
    let out = dam(&[
        "train", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&run), "--encoding", "uv",
        "--resume", s(&run.join("checkpoint.bin")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn ablate_one_factor_table() {
    let f = fixture();
    let out = f.root.join("abl");
    ok(&["ablate", "--config", s(&f.config), "--data", s(&f.data), "--out", s(&out), "--iters", "3", "--one-factor"]);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let names: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        ["no_appearance", "full", "enc_uv", "enc_depth", "enc_uv_depth", "enc_color", "no_lid", "cell_1", "cell_2", "cell_8", "cell_16", "cell_32"]
    );
    assert!(out.join("enc_uv").join("metrics.csv").exists());
}
