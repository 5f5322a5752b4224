use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segadapt::checkpoint::{save_checkpoint, Checkpoint};
use segadapt::config::TrainConfig;
use segadapt::synth::{preset_split_config, DatasetManifest, Preset, Split, MANIFEST_FILE};
use segadapt::trainer::TrainState;

fn segadapt(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segadapt"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("SEGADAPT_WORKDIR")
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = segadapt(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

const SMALL_RUN: &str = r#"
seed = 1
output = "run"

[domain]
hidden = 8
holdout = 2

[data]
source = "data/source/manifest.json"
source_val = "data/source_val/manifest.json"
target = "data/target/manifest.json"
target_test = "data/target_test/manifest.json"
stats = "data/stats.json"

[phases.source]
epochs = 2
batch_size = 4

[phases.ga]
epochs = 1
batch_size = 4
lambda_da = 1e-3

[phases.ga-ca]
epochs = 1
batch_size = 4
lambda_da = 1e-3
"#;

#[test]
fn usage_errors_exit_with_code_two() {
    let wd = tempfile::tempdir().unwrap();
    for args in [
        &["gen-data", "--preset", "large", "--seed", "0"][..],
        &["train", "--phase", "finetune", "--config", "c.toml"],
        &["report", "--evals", "--out", "r"],
        &["gen-data", "--preset", "huge", "--seed", "0", "--out", "d"],
    ] {
        let out = segadapt(wd.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn gen_data_is_reproducible_and_matches_presets() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for wd in [a.path(), b.path()] {
        ok(wd, &["gen-data", "--preset", "medium", "--seed", "3", "--out", "data", "--n", "4"]);
    }
    let fa = files(&a.path().join("data"));
    assert_eq!(fa, files(&b.path().join("data")));
    assert_eq!(fa.len(), 2 * (1 + 2 * 4) + 2 * (1 + 2));
    for f in &fa {
        let da = a.path().join("data").join(f);
        assert_eq!(fs::read(&da).unwrap(), fs::read(b.path().join("data").join(f)).unwrap(), "{f:?}");
    }
    for split in Split::ALL {
        let m = DatasetManifest::load(&a.path().join("data").join(split.name()).join(MANIFEST_FILE)).unwrap();
        let cfg = preset_split_config(Preset::Medium, 3, split).unwrap();
        assert_eq!(m.config_hash, cfg.hash());
        assert_eq!(m.count, if matches!(split, Split::Source | Split::Target) { 4 } else { 1 });
    }
}

#[test]
fn workdir_variable_overrides_flag() {
    let flag = tempfile::tempdir().unwrap();
    let env = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_segadapt"))
        .arg("--workdir")
        .arg(flag.path())
        .args(["gen-data", "--preset", "small", "--seed", "0", "--out", "d", "--n", "1"])
        .env("SEGADAPT_WORKDIR", env.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(env.path().join("d/source").join(MANIFEST_FILE).exists());
    assert!(!flag.path().join("d").exists());
}

#[test]
fn locked_workdir_is_refused() {
    let wd = tempfile::tempdir().unwrap();
    fs::write(wd.path().join(".segadapt.lock"), "1\n").unwrap();
    let out = segadapt(wd.path(), &["gen-data", "--preset", "small", "--seed", "0", "--out", "d", "--n", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn eval_reports_label_space_mismatch() {
    let wd = tempfile::tempdir().unwrap();
    ok(wd.path(), &["gen-data", "--preset", "small", "--seed", "0", "--out", "data", "--n", "4"]);
    let mut cfg = TrainConfig::new(0);
    cfg.arch.num_classes = 4;
    let ck = Checkpoint {
        config_hash: cfg.hash(),
        seed: 0,
        state: TrainState::init(&cfg).unwrap(),
    };
    save_checkpoint(&ck, &wd.path().join("four.ckpt")).unwrap();
    let out = segadapt(
        wd.path(),
        &["eval", "--checkpoint", "four.ckpt", "--manifest", "data/target_test/manifest.json", "--out", "e.json"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("label-space mismatch"), "{err}");
    assert!(!wd.path().join("e.json").exists());
}

#[test]
fn three_phase_run_evaluates_and_reports() {
    let wd = tempfile::tempdir().unwrap();
    let w = wd.path();
    ok(w, &["gen-data", "--preset", "large", "--seed", "0", "--out", "data", "--n", "8"]);
    let stats = ok(w, &["stats", "--manifest", "data/source/manifest.json", "--out", "data/stats.json"]);
    assert_eq!(stats.lines().count(), 6);
    fs::write(w.join("run.toml"), SMALL_RUN).unwrap();

    let out = segadapt(w, &["train", "--phase", "ga", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run `train --phase source` first"));

    for phase in ["source", "ga", "ga-ca"] {
        let printed = ok(w, &["train", "--phase", phase, "--config", "run.toml"]);
        assert!(printed.trim().ends_with(&format!("{phase}.ckpt")), "{printed}");
    }
    let metrics = fs::read_to_string(w.join("run/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 + 1 + 1);
    assert!(w.join("run/loss_curves.png").exists());

    let mut evals = Vec::new();
    for phase in ["source", "ga", "ga-ca"] {
        let e = format!("eval-{phase}.json");
        let printed = ok(
            w,
            &[
                "eval",
                "--checkpoint",
                &format!("run/checkpoints/{phase}.ckpt"),
                "--manifest",
                "data/target_test/manifest.json",
                "--out",
                &e,
            ],
        );
        assert!(printed.contains("mIoU"));
        evals.push(e);
    }
    let mut args = vec!["report", "--out", "report", "--evals"];
    args.extend(evals.iter().map(String::as_str));
    let tsv = ok(w, &args);
    assert_eq!(tsv.lines().count(), 1 + 3);
    for f in ["report.tsv", "report.json", "iou_bars.png"] {
        assert!(w.join("report").join(f).exists(), "{f}");
    }

    // rerunning a finished phase is a no-op that leaves the log alone
    ok(w, &["train", "--phase", "ga-ca", "--config", "run.toml", "--resume", "run/checkpoints/ga-ca.ckpt"]);
    assert_eq!(fs::read_to_string(w.join("run/metrics.tsv")).unwrap(), metrics);
}
