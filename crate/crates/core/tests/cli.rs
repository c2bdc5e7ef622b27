mod common;

use common::{artifacts, differences, run, run_ok, session, tiny_config};

#[test]
fn every_command_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cmds = session(a.path(), 7);
    session(b.path(), 7);
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    assert!(fa.len() > 40, "only {} artifacts", fa.len());
    assert_eq!(differences(&fa, &fb), Vec::<String>::new());
    assert_eq!(cmds.len(), 11);
    for d in ["out/generate", "out/edit", "out/transfer", "out/multi", "out/style", "out/bench", "out/pretrain"] {
        assert!(a.path().join(d).join("timings.json").exists(), "{d}");
    }
    assert!(fa.keys().any(|k| k.ends_with("report.csv")));
    assert!(fa.keys().any(|k| k.starts_with("store/concepts/") && k.ends_with(".skc")));
}

#[test]
fn other_seed_changes_outputs() {
    let a = tempfile::tempdir().unwrap();
    let cfg = tiny_config(a.path());
    let cfg = cfg.to_str().unwrap();
    for (seed, out) in [("1", "s1"), ("2", "s2")] {
        run_ok(a.path(), &["--config", cfg, "--seed", seed, "synth-data", "--concepts", "1", "--out", out]);
    }
    let fa = artifacts(&a.path().join("s1"));
    let fb = artifacts(&a.path().join("s2"));
    assert!(!differences(&fa, &fb).is_empty());
}

#[test]
fn bad_invocations_fail_with_messages() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    let cfg = tiny_config(root);
    let cfg = cfg.to_str().unwrap();
    std::fs::write(root.join("bad.toml"), "[stage1]\nstepz = 3\n").unwrap();
    std::fs::write(root.join("v2.toml"), "version = 2\n").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["--bogus", "pretrain"],
        vec!["generate"],
        vec!["--config", "bad.toml", "pretrain"],
        vec!["--config", "v2.toml", "pretrain"],
        vec!["--config", "missing.toml", "pretrain"],
        vec!["--config", cfg, "--seed", "x", "pretrain"],
        vec!["--config", cfg, "synth-data", "--concepts", "1000"],
        vec!["--config", cfg, "train", "--pairs", "nowhere"],
        vec!["--config", cfg, "bench", "--manifest", "nowhere", "--variants", "warp"],
        vec!["--config", cfg, "--base", "0123", "generate", "--concept", "x", "--sketch", "s.json", "--prompt", "a photo of [v]"],
    ];
    for args in cases {
        let o = run(root, &args);
        assert!(!o.status.success(), "{args:?} succeeded");
        assert!(!o.stderr.is_empty(), "{args:?} printed nothing");
    }
}

#[test]
fn prompt_and_concept_errors() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    let cfg = tiny_config(root);
    let cfg = cfg.to_str().unwrap();
    run_ok(root, &["--config", cfg, "pretrain", "--out", "p"]);
    run_ok(root, &["--config", cfg, "synth-data", "--concepts", "1", "--pairs", "1", "--edits", "0", "--out", "data"]);
    let ids: Vec<String> = serde_json::from_slice(&std::fs::read(root.join("data/index.json")).unwrap()).unwrap();
    let id = ids[0].as_str();
    run_ok(root, &["--config", cfg, "train", "--pairs", &format!("data/{id}"), "--out", "t"]);
    let sk = format!("data/{id}/pair_0.strokes.json");
    let gen = |prompt: &str, concept: &str| run(root, &["--config", cfg, "generate", "--concept", concept, "--sketch", &sk, "--prompt", prompt, "--out", "g"]);
    assert!(gen("a photo of [v]", id).status.success());
    let o = gen(&format!("a photo of a {}", id.split('-').nth(1).unwrap()), id);
    assert!(!o.status.success() && String::from_utf8_lossy(&o.stderr).contains("[v]"));
    assert!(!gen("a photo of [v] zebra", id).status.success());
    let o = gen("a photo of [v]", "ghost");
    assert!(!o.status.success() && String::from_utf8_lossy(&o.stderr).contains("not found"));
    let o = run(root, &["--config", cfg, "style", "--concept", id, "--sketch", &sk, "--prompt", "a photo of [v]", "--out", "s"]);
    assert!(!o.status.success());
}
