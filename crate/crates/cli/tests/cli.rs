use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fixtures").canonicalize().unwrap()
}

fn itl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_itl")).args(args).env_remove("ITL_DATA_ROOT").env("RUST_LOG", "warn").output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SMALL_SHD: &str = r#"
version = 1
task = "shd"
seeds = [3]

[data]
speech_source = "files"
train_samples = 8
test_samples = 4

[substrate]
n_hidden = 12

[train]
epochs = 1
batch_size = 4
threads = 1
"#;

#[test]
fn bad_configuration_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "version = 1\nunknown_key = true\n");
    assert_eq!(itl(&["train", "--config", &cfg]).status.code(), Some(2));
    assert_eq!(itl(&["train", "--config", "/does/not/exist.toml"]).status.code(), Some(2));
    let ok = write(dir.path(), "ok.toml", "version = 1\n");
    // `sweep` with a non-sweep experiment.
    assert_eq!(itl(&["sweep", "--config", &ok]).status.code(), Some(2));
    assert_eq!(itl(&["train", "--config", &ok, "--preset", "huge"]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "mnist.toml", &format!("version = 1\n[data]\nroot = \"{}\"\n", dir.path().display()));
    let out = dir.path().join("run");
    let o = itl(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "shd.toml", SMALL_SHD);
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_itl"))
        .args(["train", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()])
        .env("ITL_DATA_ROOT", fixtures())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoints/base-seed5.ckpt").is_file());
    let summary = std::fs::read_to_string(out.join("train.csv")).unwrap();
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("seed,train_acc,test_acc,mean_spikes,status"));
    assert!(lines.next().unwrap().starts_with("5,"));
    let ckpt = out.join("checkpoints/base-seed5.ckpt");
    let eval_out = dir.path().join("eval");
    let o = Command::new(env!("CARGO_BIN_EXE_itl"))
        .args(["eval", "--config", &cfg, "--seed", "5", "--out", eval_out.to_str().unwrap()])
        .env("ITL_DATA_ROOT", fixtures())
        .output()
        .unwrap();
    // No checkpoint configured for eval.
    assert_eq!(o.status.code(), Some(2));
    let with_ckpt = write(dir.path(), "eval2.toml", &SMALL_SHD.replace("seeds = [3]", &format!("seeds = [3]\ncheckpoint = \"{}\"", ckpt.display())));
    let o = Command::new(env!("CARGO_BIN_EXE_itl"))
        .args(["eval", "--config", &with_ckpt, "--seed", "5", "--out", eval_out.to_str().unwrap()])
        .env("ITL_DATA_ROOT", fixtures())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(eval_out.join("eval.csv").is_file());
}
