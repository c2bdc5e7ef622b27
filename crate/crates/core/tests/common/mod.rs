//! Drives the `sketch-concept` binary through every command on a tiny
//! configuration.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const BIN: &str = env!("CARGO_BIN_EXE_sketch-concept");

/// Excluded from byte comparisons: wall-clock only.
pub const TIMINGS: &str = "timings.json";

pub fn tiny_config(root: &Path) -> PathBuf {
    let store = root.join("store");
    let toml = format!(
        r#"version = 1

[paths]
store = "{store}"

[corpus]
pairs = 12
seed = 5

[pretrain]
steps = 3
batch = 2
log_every = 1

[pretrain.denoiser]
size = 32
channels = [8, 8, 8, 8]
groups = 2
heads = 2
text_dim = 8
context_len = 20
time_dim = 8

[stage1]
steps = 2
batch = 1

[stage2]
steps = 2
batch = 1

[sampling]
steps = 3

[bench]
steps = 2
templates = 2
"#,
        store = store.display()
    );
    let p = root.join("config.toml");
    std::fs::write(&p, toml).unwrap();
    p
}

pub fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(root).env_remove("SKETCH_CONCEPT_STORE").args(args).output().expect("binary runs")
}

pub fn run_ok(root: &Path, args: &[&str]) -> Output {
    let o = run(root, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Every CLI command once, in dependency order. Returns the commands run.
pub fn session(root: &Path, seed: u64) -> Vec<String> {
    let cfg = tiny_config(root);
    let cfg = cfg.to_str().unwrap();
    let seed = seed.to_string();
    let mut cmds: Vec<String> = Vec::new();
    let mut go = |args: &[&str]| {
        let mut full = vec!["--config", cfg, "--seed", &seed];
        full.extend_from_slice(args);
        run_ok(root, &full);
        cmds.push(args[0].to_string());
    };
    go(&["pretrain", "--out", "out/pretrain"]);
    go(&["synth-data", "--concepts", "2", "--pairs", "2", "--edits", "3", "--out", "data"]);
    let ids: Vec<String> = serde_json::from_slice(&std::fs::read(root.join("data/index.json")).unwrap()).unwrap();
    let (a, b) = (ids[0].as_str(), ids[1].as_str());
    let da = format!("data/{a}");
    let sk_a = format!("{da}/pair_0.strokes.json");
    let sk_edit = format!("{da}/edit_0.strokes.json");
    let sk_b = format!("data/{b}/pair_0.strokes.json");
    let img_a = format!("{da}/pair_0.png");
    go(&["train", "--pairs", &da, "--out", "out/train"]);
    go(&["train", "--pairs", &format!("data/{b}"), "--out", "out/train"]);
    go(&["train", "--pairs", &da, "--ablate", "single_sketch", "--out", "out/train"]);
    go(&["generate", "--concept", a, "--sketch", &sk_a, "--prompt", "a photo of [v] in the snow", "--out", "out/generate"]);
    go(&["edit", "--concept", a, "--image", &img_a, "--sketch", &sk_edit, "--prompt", "a photo of [v]", "--out", "out/edit"]);
    go(&["transfer", "--concept", b, "--target", a, "--image", &img_a, "--sketch", &sk_edit, "--prompt", "a photo of [v]", "--out", "out/transfer"]);
    go(&["multi", "--concept", a, "--concept", b, "--sketch", &sk_a, "--sketch", &sk_b, "--out", "out/multi"]);
    let class = a.split('-').nth(1).unwrap();
    go(&["style", "--concept", a, "--sketch", &sk_a, "--prompt", &format!("a watercolor painting of a {class}"), "--out", "out/style"]);
    go(&["bench", "--manifest", "data", "--variants", "full,no_reg_loss", "--train", "--out", "out/bench"]);
    cmds
}

/// All files under `root` keyed by relative path, minus timing files.
pub fn artifacts(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != TIMINGS && p.file_name().unwrap() != "config.toml" {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Paths whose bytes differ between two artifact sets, plus paths present in only one.
pub fn differences(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut d: Vec<String> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.clone()).collect();
    d.extend(b.keys().filter(|k| !a.contains_key(*k)).cloned());
    d
}
