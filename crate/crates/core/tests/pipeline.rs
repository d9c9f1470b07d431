//! End-to-end pipeline tests through the compiled binary: stage chaining,
//! artifact shape, determinism across runs and resumes, and the exit-code
//! contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_pluglm")
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args, &[]);
    assert!(
        out.status.success(),
        "pluglm {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(args: &[&str]) -> i32 {
    run(args, &[]).status.code().expect("exit code")
}

/// Small world + model that trains in about a second.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    let text = format!(
        r#"
out_dir = "{}"

[world]
n_source = 12
target_sizes = [4]
seed = 21

[model]
d_model = 32
d_ff = 64
n_heads = 2
seed = 11

[pretrain]
lr = 0.004
epochs = 60
batch_size = 8
patience = 200
dev_fraction = 0.25
seed = 5

[update]
regime = "gated_lora"
lr = 0.03
epochs = 40
batch_size = 8
rank = 4
seed = 5

[eval]
max_answer_len = 3
{}
"#,
        dir.join("run").display(),
        extra
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn sha256(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(std::fs::read(path).unwrap())
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect()
}

#[test]
fn pipeline_runs_end_to_end_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();

    for stage in ["gen-data", "pretrain", "update", "eval", "report"] {
        run_ok(&["--config", cfg, stage]);
    }

    let run_dir = dir.path().join("run");
    for artifact in [
        "dataset.jsonl",
        "base.ckpt",
        "pretrain_curves.csv",
        "update_phase1.ckpt",
        "update_curves_phase1.csv",
        "delta_sweep.csv",
        "eval_report_base.json",
        "eval_report_update.json",
        "eval_phases.json",
        "summary.csv",
        "manifest.json",
    ] {
        assert!(run_dir.join(artifact).exists(), "missing {}", artifact);
    }

    // the sweep covers the full grid
    let sweep = std::fs::read_to_string(run_dir.join("delta_sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "delta,dev_ks_em,dev_kt_em,harmonic_mean");
    assert_eq!(lines.len(), 1 + 21, "one row per grid point");
    assert!(lines[1].starts_with("0.00,"));
    assert!(lines[21].starts_with("1.00,"));

    // update curves: one row per epoch (no early stop in adapter training)
    let curves = std::fs::read_to_string(run_dir.join("update_curves_phase1.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 40);

    // summary has the base and updated rows
    let summary = std::fs::read_to_string(run_dir.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("base,"));
    assert!(rows[2].starts_with("updated,gated_lora,"));

    // manifest recorded every stage with artifact digests
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap())
            .unwrap();
    let stages = manifest["stages"].as_object().unwrap();
    for stage in ["gen-data", "pretrain", "update", "eval", "report"] {
        assert!(stages.contains_key(stage), "manifest missing {}", stage);
    }
    let recorded = &stages["pretrain"]["artifacts"][0];
    assert_eq!(recorded["path"], "base.ckpt");
    assert_eq!(
        recorded["sha256"].as_str().unwrap(),
        sha256(&run_dir.join("base.ckpt"))
    );

    // an identical config in a fresh directory reproduces every byte
    let dir2 = tempfile::tempdir().unwrap();
    let cfg2 = tiny_config(dir2.path(), "");
    let cfg2 = cfg2.to_str().unwrap();
    for stage in ["gen-data", "pretrain", "update"] {
        run_ok(&["--config", cfg2, stage]);
    }
    let run2 = dir2.path().join("run");
    for artifact in ["dataset.jsonl", "base.ckpt", "update_phase1.ckpt", "delta_sweep.csv"] {
        assert_eq!(
            sha256(&run_dir.join(artifact)),
            sha256(&run2.join(artifact)),
            "{} differs between identical runs",
            artifact
        );
    }
}

#[test]
fn interrupted_pretrain_resumes_to_the_same_bytes() {
    // run A: 8 epochs in one shot
    let a = tempfile::tempdir().unwrap();
    let cfg_a = tiny_config(a.path(), "");
    // keep the loss target unreachable so only the epoch cap stops training
    let text = std::fs::read_to_string(&cfg_a).unwrap().replace("epochs = 60", "epochs = 8");
    std::fs::write(&cfg_a, text).unwrap();
    let cfg_a = cfg_a.to_str().unwrap();
    run_ok(&["--config", cfg_a, "gen-data"]);
    run_ok(&["--config", cfg_a, "pretrain"]);

    // run B: 3 epochs, then re-run with the cap raised to 8
    let b = tempfile::tempdir().unwrap();
    let cfg_b = tiny_config(b.path(), "");
    let base_text = std::fs::read_to_string(&cfg_b).unwrap();
    std::fs::write(&cfg_b, base_text.replace("epochs = 60", "epochs = 3")).unwrap();
    let cfg_b_s = cfg_b.to_str().unwrap();
    run_ok(&["--config", cfg_b_s, "gen-data"]);
    run_ok(&["--config", cfg_b_s, "pretrain"]);
    std::fs::write(&cfg_b, base_text.replace("epochs = 60", "epochs = 8")).unwrap();
    let out = run_ok(&["--config", cfg_b_s, "pretrain"]);
    assert!(out.contains("resuming"), "expected a resume, got: {}", out);

    assert_eq!(
        sha256(&a.path().join("run/base.ckpt")),
        sha256(&b.path().join("run/base.ckpt")),
        "resumed pretraining diverged from the uninterrupted run"
    );
    // curve files agree too (concatenated across the two processes)
    assert_eq!(
        std::fs::read_to_string(a.path().join("run/pretrain_curves.csv")).unwrap(),
        std::fs::read_to_string(b.path().join("run/pretrain_curves.csv")).unwrap()
    );

    // a third invocation with nothing left to do leaves the file alone
    let before = sha256(&b.path().join("run/base.ckpt"));
    let out = run_ok(&["--config", cfg_b_s, "pretrain"]);
    assert!(out.contains("already trained"), "got: {}", out);
    assert_eq!(sha256(&b.path().join("run/base.ckpt")), before);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();

    // malformed TOML
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "this is not toml [").unwrap();
    assert_eq!(exit_code(&["--config", bad.to_str().unwrap(), "gen-data"]), 2);

    // unknown key
    std::fs::write(&bad, "[model]\nwidth = 4\n").unwrap();
    assert_eq!(exit_code(&["--config", bad.to_str().unwrap(), "gen-data"]), 2);

    // adapter knob under a full-model regime
    std::fs::write(&bad, "[update]\nregime = \"finetune\"\nrank = 4\n").unwrap();
    assert_eq!(exit_code(&["--config", bad.to_str().unwrap(), "gen-data"]), 2);

    // nonexistent config file
    assert_eq!(
        exit_code(&["--config", dir.path().join("ghost.toml").to_str().unwrap(), "gen-data"]),
        2
    );

    // flag overrides are validated like file values
    let cfg = tiny_config(dir.path(), "");
    assert_eq!(
        exit_code(&["--config", cfg.to_str().unwrap(), "--regime", "mystery", "gen-data"]),
        2
    );
    assert_eq!(
        exit_code(&["--config", cfg.to_str().unwrap(), "--delta", "1.5", "gen-data"]),
        2
    );
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();

    // nothing generated yet
    assert_eq!(exit_code(&["--config", cfg, "pretrain"]), 3);
    assert_eq!(exit_code(&["--config", cfg, "eval"]), 3);
    assert_eq!(exit_code(&["--config", cfg, "report"]), 3);

    // with data but no model, update still has nothing to start from
    run_ok(&["--config", cfg, "gen-data"]);
    assert_eq!(exit_code(&["--config", cfg, "update"]), 3);
}

#[test]
fn stale_artifacts_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "");
    let cfg = cfg_path.to_str().unwrap();
    run_ok(&["--config", cfg, "gen-data"]);
    run_ok(&["--config", cfg, "pretrain"]);

    // growing the world after gen-data invalidates the dataset on disk
    let text = std::fs::read_to_string(&cfg_path).unwrap();
    std::fs::write(&cfg_path, text.replace("n_source = 12", "n_source = 14")).unwrap();
    assert_eq!(exit_code(&["--config", cfg, "update"]), 2);
    std::fs::write(&cfg_path, &text).unwrap();

    // changing the architecture after pretraining invalidates the model
    std::fs::write(&cfg_path, text.replace("d_model = 32", "d_model = 16")).unwrap();
    let e = run(&["--config", cfg, "update"], &[]);
    assert_eq!(e.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&e.stderr).contains("re-run pretrain"),
        "stderr: {}",
        String::from_utf8_lossy(&e.stderr)
    );
}

#[test]
fn out_dir_precedence_flag_env_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path(), "");
    let cfg = cfg_path.to_str().unwrap();
    let env_dir = dir.path().join("from_env");
    let flag_dir = dir.path().join("from_flag");

    // env var beats the config file
    let out = run(
        &["--config", cfg, "gen-data"],
        &[("PLUGLM_OUT_DIR", env_dir.to_str().unwrap())],
    );
    assert!(out.status.success());
    assert!(env_dir.join("dataset.jsonl").exists());
    assert!(!dir.path().join("run").exists());

    // the flag beats the env var
    let out = run(
        &["--config", cfg, "--out-dir", flag_dir.to_str().unwrap(), "gen-data"],
        &[("PLUGLM_OUT_DIR", env_dir.to_str().unwrap())],
    );
    assert!(out.status.success());
    assert!(flag_dir.join("dataset.jsonl").exists());
}

#[test]
fn cli_reports_version_and_help() {
    let out = run(&["--help"], &[]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for stage in ["gen-data", "pretrain", "update", "eval", "report"] {
        assert!(text.contains(stage), "help lacks {}", stage);
    }
    assert!(run(&["--version"], &[]).status.success());
}
