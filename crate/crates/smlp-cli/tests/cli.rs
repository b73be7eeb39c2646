//! End-to-end checks of the binary: flags, output shapes, exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn smlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smlp"))
        .args(args)
        .env_remove("SMLP_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn analyze_named_model_reports_reference_costs() {
    let out = smlp(&["analyze", "--model", "smlpnet-t", "--format", "csv"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("Model,Params(M),MACs(B)"), "{text}");
    assert!(text.contains("smlpnet-t,24.1,5.0"), "{text}");
}

#[test]
fn analyze_all_main_emits_four_rows() {
    let out = smlp(&["analyze", "--all-main", "--format", "csv"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 5, "{text}");
    for name in ["smlpnet-t-star", "smlpnet-t", "smlpnet-s", "smlpnet-b"] {
        assert!(text.contains(name), "{text}");
    }
}

#[test]
fn analyze_stage_sweep_descends() {
    let out = smlp(&["analyze", "--table3-sweep", "--format", "csv"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let params: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|line| line.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(params.len(), 5, "{text}");
    for pair in params.windows(2) {
        assert!(pair[0] > pair[1], "sweep not descending: {params:?}");
    }
}

#[test]
fn analyze_without_target_or_with_bad_name_is_a_usage_error() {
    let out = smlp(&["analyze", "--model", "nosuch"]);
    assert_eq!(out.status.code(), Some(2));
    let out = smlp(&["analyze"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_accepts_a_stagewise_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cfg");
    std::fs::write(
        &path,
        "[model]\n\
         name = custom-net\n\
         height = 64\n\
         embed_dim = 24\n\
         num_classes = 100\n\
         ffn_expansion = 2\n\
         \n\
         [stage1]\n\
         depth = 2\n\
         \n\
         [stage2]\n\
         depth = 2\n\
         mixer = dense_mlp\n\
         expansion = 4\n\
         \n\
         [stage3]\n\
         depth = 1\n\
         mixer = none\n",
    )
    .unwrap();
    let out = smlp(&["analyze", "--config", path.to_str().unwrap(), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("custom-net"), "{}", stdout(&out));
}

#[test]
fn probe_counts_row_column_then_full_grid() {
    let out = smlp(&[
        "probe", "--grid", "4", "4", "--source", "1", "2", "--passes", "1",
    ]);
    assert!(out.status.success());
    assert!(
        stdout(&out).contains("influenced 7 of 16"),
        "{}",
        stdout(&out)
    );

    let out = smlp(&[
        "probe", "--grid", "4", "4", "--source", "1", "2", "--passes", "2",
    ]);
    assert!(out.status.success());
    assert!(
        stdout(&out).contains("influenced 16 of 16"),
        "{}",
        stdout(&out)
    );

    let out = smlp(&[
        "probe", "--grid", "4", "4", "--source", "4", "0", "--passes", "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_block_passes_and_negative_control_fails() {
    let out = smlp(&["gradcheck", "--scope", "block"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("gradcheck: PASS"));

    let out = smlp(&["gradcheck", "--scope", "block", "--perturb-backward"]);
    assert_eq!(out.status.code(), Some(1), "{}", stdout(&out));
    assert!(stdout(&out).contains("gradcheck: FAIL"));
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "[model]\n\
         variant = smlpnet-t\n\
         height = 32\n\
         num_classes = 10\n\
         embed_dim = 16\n\
         depths = 1,1,1,1\n\
         droppath = 0.0\n\
         \n\
         [train]\n\
         epochs = 2\n\
         warmup_epochs = 1\n\
         batch_size = 32\n\
         seed = 3\n\
         subset = 64\n\
         \n\
         [data]\n\
         mean = 0.5,0.5,0.5\n\
         std = 0.25,0.25,0.25\n",
    )
    .unwrap();
    path
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let config = write_config(dir.path());

    let out = smlp(&[
        "synth-data",
        "--out",
        data.to_str().unwrap(),
        "--train-n",
        "64",
        "--test-n",
        "32",
    ]);
    assert!(out.status.success(), "{}", stdout(&out));

    let out = smlp(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(run.join("last.ckpt").exists());
    assert!(run.join("best.ckpt").exists());
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,lr,train_loss,train_acc,eval_acc"));
    assert_eq!(csv.lines().count(), 3, "{csv}"); // header + 2 epochs

    let out = smlp(&[
        "eval",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("top-1 accuracy"), "{}", stdout(&out));

    // a single record file works as the data argument too
    let out = smlp(&[
        "eval",
        "--checkpoint",
        run.join("last.ckpt").to_str().unwrap(),
        "--data",
        data.join("test_batch.bin").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("on 32 samples"), "{}", stdout(&out));
}

#[test]
fn train_without_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = smlp(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("nope");
    let out = smlp(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_dir_env_var_is_the_default_root() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let config = write_config(dir.path());
    let out = smlp(&[
        "synth-data",
        "--out",
        data.to_str().unwrap(),
        "--train-n",
        "32",
        "--test-n",
        "16",
    ]);
    assert!(out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_smlp"))
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--epochs",
            "2",
            "--subset",
            "32",
        ])
        .env("SMLP_DATA_DIR", data.to_str().unwrap())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}
