//! End-to-end behavior of the command-line surface on a small synthetic
//! problem: stage composition, determinism, manifest completeness, and the
//! error contract.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

fn small_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
  "seed": 21,
  "synth": {{"participants": 3, "stimuli": 160, "reps": 3, "embed_dim": 16,
             "concepts": 4, "support_size": 6, "extra_voxels": 40,
             "target_nc": 40.0, "nonlinearity": "linear", "mode": "consistent"}},
  "split": {{"val_stimuli": 30, "test_stimuli": 30}},
  "decoder": {{"hidden": 32, "epochs": 5, "batch_size": 32, "lr_init": 3e-4,
               "lr_drop_epochs": [3, 4], "lr_drop_factor": 10.0, "tau": 1.0,
               "leaky_slope": 0.01, "normalize_embeddings": false, "seed": 0}},
  "sdc": {{"components": 4, "iters": 1200, "batch": 64, "lr": 2e-3, "slope": 0.05,
           "tau": 1.0, "symmetrize": false, "probe_every": 200, "seed": 0}},
  "sdc_restarts": 2,
  "mask_alpha": 0.05,
  "report": {{"top_k": 5, "tsne_k": 40, "tsne_iterations": 120, "perplexity": 8.0}}
  {extra}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn sdc_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sdc"))
}

fn hash_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
                let bytes = std::fs::read(&path).unwrap();
                out.insert(rel, sdc_core::reporter::sha256_hex(&bytes));
            }
        }
    }
    out
}

#[test]
fn pipeline_matches_stagewise_composition() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let all_at_once = tmp.path().join("whole");
    let stepwise = tmp.path().join("steps");

    let status = sdc_bin()
        .args(["pipeline", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&all_at_once)
        .status()
        .unwrap();
    assert!(status.success());

    for stage in sdc_cli::PIPELINE_STAGES {
        let status = sdc_bin()
            .args([stage, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&stepwise)
            .status()
            .unwrap();
        assert!(status.success(), "stage {stage} failed");
    }

    // The pipeline additionally checks the recovered structure against the
    // planted truth; that extra block lands in metrics.json, and its hash in
    // summary.json. Every other artifact must match byte for byte.
    let strip = |mut t: BTreeMap<String, String>| {
        t.remove("metrics.json");
        t.remove("summary.json");
        t
    };
    let whole = hash_tree(&all_at_once);
    assert!(whole.contains_key("summary.json"));
    assert_eq!(strip(whole), strip(hash_tree(&stepwise)));

    let mut m_whole: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(all_at_once.join("metrics.json")).unwrap())
            .unwrap();
    let m_steps: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(stepwise.join("metrics.json")).unwrap())
            .unwrap();
    assert!(m_whole.get("verify").is_some());
    m_whole.as_object_mut().unwrap().remove("verify");
    assert_eq!(m_whole, m_steps);

    let man_whole = sdc_core::reporter::Manifest::load(&all_at_once).unwrap();
    let man_steps = sdc_core::reporter::Manifest::load(&stepwise).unwrap();
    assert_eq!(man_whole.config_hash, man_steps.config_hash);
    assert_eq!(man_whole.seeds, man_steps.seeds);
}

#[test]
fn strict_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("out");
    for _ in 0..2 {
        let status = sdc_bin()
            .args(["pipeline", "--strict", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let first = hash_tree(&out);
    let status = sdc_bin()
        .args(["pipeline", "--strict", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(first, hash_tree(&out));
}

#[test]
fn manifest_covers_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let status =
        sdc_bin().args(["pipeline", "--config"]).arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert!(status.success());

    let manifest = sdc_core::reporter::Manifest::load(&out).unwrap();
    let tree = hash_tree(&out);
    for (rel, _) in tree.iter().filter(|(rel, _)| rel.as_str() != "summary.json") {
        assert!(manifest.artifacts.contains_key(rel), "{rel} missing from manifest");
    }
    for rel in manifest.artifacts.keys() {
        assert!(tree.contains_key(rel), "{rel} in manifest but not on disk");
    }
    // spot-check a recorded hash against the file bytes
    let (rel, entry) = manifest.artifacts.iter().next().unwrap();
    assert_eq!(&tree[rel], &entry.sha256);
}

#[test]
fn oversized_k_fails_with_machine_readable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), r#", "eval_ks": [1, 500]"#);
    let out = tmp.path().join("out");
    for stage in ["synth", "split", "noise-ceiling", "train-decoder", "fit-sdc"] {
        let status = sdc_bin()
            .args([stage, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let output = sdc_bin()
        .args(["eval-topk", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    let line = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["error"], "invalid_argument");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let output = sdc_bin().arg("frobnicate").output().unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_one() {
    let output = sdc_bin().args(["synth", "--config", "/nonexistent/cfg.json"]).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("\"error\""));
}

#[test]
fn stages_refuse_to_run_before_their_inputs_exist(){
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "");
    let out = tmp.path().join("out");
    let output = sdc_bin()
        .args(["train-decoder", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
}
