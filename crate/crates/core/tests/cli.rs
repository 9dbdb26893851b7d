use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_unetlab");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs every command on a tiny dataset and model under `root`.
fn pipeline(root: &Path) {
    let data = root.join("data");
    let model = root.join("model");
    let ckpt = model.join("checkpoint.bin");
    ok(&["--seed", "3", "gen-data", "--out", s(&data), "--n", "16", "--size", "8"]);
    ok(&[
        "--seed", "3", "train", "--data", s(&data), "--out", s(&model), "--epochs", "2", "--batch-size", "8",
        "--base-channels", "4", "--encoder-blocks", "1",
    ]);
    let phi = |sub: &str| root.join(sub);
    let common = |out: &Path| -> Vec<String> {
        ["--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(out), "--n-draws", "2"]
            .iter()
            .map(|x| x.to_string())
            .collect()
    };
    for sub in ["sparsity", "selectivity", "stability", "stats"] {
        let mut args: Vec<String> = vec!["--seed".into(), "3".into(), "analyze".into(), sub.into()];
        args.extend(common(&phi(sub)));
        if sub == "stability" {
            args.extend(["--grid-points", "3", "--images", "2"].map(String::from));
        }
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let mut cluster: Vec<String> = vec!["--seed".into(), "3".into(), "cluster".into(), "--k".into(), "2".into()];
    cluster.extend(common(&phi("cluster")));
    ok(&cluster.iter().map(String::as_str).collect::<Vec<_>>());
    let mut nb: Vec<String> = vec!["--seed".into(), "3".into(), "neighbors".into(), "--target".into(), "1".into()];
    nb.extend(common(&phi("neighbors")));
    ok(&nb.iter().map(String::as_str).collect::<Vec<_>>());
    ok(&[
        "--seed", "3", "sample", "--checkpoint", s(&ckpt), "--out", s(&phi("sample")), "--n", "2", "--T", "5",
    ]);
    ok(&[
        "--seed", "3", "reconstruct", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&phi("recon")),
        "--conditioner", "0", "--n", "1", "--T", "5", "--phi-draws", "2",
    ]);
    let mut emb: Vec<String> = ["--seed", "3", "embed-check", "--pairs", "10", "--samples", "2", "--T", "3"]
        .map(String::from)
        .to_vec();
    emb.extend(common(&phi("embed")));
    ok(&emb.iter().map(String::as_str).collect::<Vec<_>>());
}

/// Relative path to contents, skipping run records (they name the output directory).
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "run.json" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }
    for expected in [
        "data/manifest.json",
        "model/checkpoint.bin",
        "model/loss.csv",
        "selectivity/selectivity.csv",
        "stability/stability.csv",
        "cluster/assignments.csv",
        "cluster/cluster_summary.json",
        "neighbors/neighbors.csv",
        "recon/phi_match.csv",
        "embed/embedding.csv",
        "embed/embedding_summary.json",
    ] {
        assert!(sa.contains_key(Path::new(expected)), "missing {expected}");
    }
    assert!(!a.path().join("model/.lock").exists());
    let run: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("model/run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 3);
    let summary: serde_json::Value =
        serde_json::from_slice(&sa[Path::new("embed/embedding_summary.json")]).unwrap();
    for key in ["pairs", "excluded", "a", "b", "b_over_a", "spearman"] {
        assert!(summary.get(key).is_some(), "summary lacks {key}");
    }
}

#[test]
fn seeds_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--seed", "1", "gen-data", "--out", s(&a), "--n", "4", "--size", "8"]);
    ok(&["--seed", "2", "gen-data", "--out", s(&b), "--n", "4", "--size", "8"]);
    assert_ne!(fs::read(a.join("img_00000.pgm")).unwrap(), fs::read(b.join("img_00000.pgm")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["train", "--out", out]), 2);
    assert_eq!(code(&["train", "--data", "/nonexistent/data", "--out", out]), 2);
    assert_eq!(code(&["gen-data", "--out", out, "--n", "x"]), 2);
    let data = dir.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--n", "4", "--size", "8"]);
    assert_eq!(
        code(&["embed-check", "--data", s(&data), "--checkpoint", "/nonexistent.bin", "--out", out, "--pairs", "3"]),
        2
    );
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    ok(&["gen-data", "--out", s(&data), "--n", "4", "--size", "8"]);
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a checkpoint").unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&["sample", "--checkpoint", s(&junk), "--out", s(&out), "--n", "1"]), 1);

    let locked = dir.path().join("locked");
    fs::create_dir_all(&locked).unwrap();
    fs::write(locked.join(".lock"), b"").unwrap();
    assert_eq!(code(&["gen-data", "--out", s(&locked), "--n", "4", "--size", "8"]), 1);
}

#[test]
fn version_and_help_succeed() {
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["analyze", "--help"]), 0);
}
