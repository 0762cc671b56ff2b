#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
[data]
n_train = 2
n_test = 2
train_frames = 6
test_frames = 6
image_size = 32
k_sup = 4

[model]
image_size = 32
k_self = 6
k_sup = 4
channels = 8
app_channels = 8
heads = 2
d_ff = 16

[train]
steps = 4
batch_size = 2
lr_milestones = []
log_every = 1

[eval]
curve_window = 2
savgol_window = 3
savgol_poly = 1
"#;

/// Writes the tiny config into `dir` with data and outputs under it.
pub fn tiny_config(dir: &Path) -> PathBuf {
    let text = format!(
        "data_dir = {:?}\nout_dir = {:?}\n{TINY}",
        dir.join("data").display().to_string(),
        dir.join("run").display().to_string()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn ttpose(args: &[&str]) -> Output {
    ttpose_env(args, &[])
}

pub fn ttpose_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ttpose"));
    c.args(args).env_remove("TTPK_SEED").env("RUST_LOG", "warn");
    for (k, v) in env {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Runs and insists on success, returning stdout.
pub fn ok(args: &[&str]) -> String {
    let o = ttpose(args);
    assert!(o.status.success(), "ttpose {args:?} failed: {}", stderr(&o));
    stdout(&o)
}

/// Every file under `root`, relative path and contents, sorted.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
