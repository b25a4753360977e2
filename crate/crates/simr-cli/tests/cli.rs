//! End-to-end runs of the `simr` binary: artifact layout, determinism,
//! exit codes, and the report flags downstream tooling keys on.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_simr"))
}

fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "simr {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = bin().current_dir(dir).args(args).output().expect("spawn");
    assert!(!out.status.success(), "simr {args:?} unexpectedly succeeded");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// One small dataset plus one trained run, shared read-only by the tests.
struct Ctx {
    _keep: tempfile::TempDir,
    root: PathBuf,
}

static CTX: OnceLock<Ctx> = OnceLock::new();

const GEN: &[&str] = &[
    "gen-data", "--out", "ds", "--k", "4", "--l", "16", "--p", "8", "--n-train", "150",
    "--n-val", "50", "--n-test", "80", "--seed", "7",
];
const TRAIN_DIMS: &[&str] = &[
    "--dim", "16", "--heads", "2", "--n-enc", "1", "--epochs", "3", "--batch-size", "16",
];

fn train_args(out: &str) -> Vec<&str> {
    let mut v = vec!["train", "--dataset", "ds", "--out", out];
    v.extend_from_slice(TRAIN_DIMS);
    v
}

fn ctx() -> &'static Ctx {
    CTX.get_or_init(|| {
        let keep = tempfile::tempdir().expect("tempdir");
        let root = keep.path().to_path_buf();
        run_ok(&root, GEN);
        run_ok(&root, &train_args("run_a"));
        Ctx { _keep: keep, root }
    })
}

fn read(root: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(root.join(rel)).unwrap_or_else(|e| panic!("read {rel}: {e}"))
}

#[test]
fn gen_data_is_deterministic_and_creates_missing_dirs() {
    let c = ctx();
    // nested path that does not exist yet
    run_ok(&c.root, &{
        let mut v = GEN.to_vec();
        v[2] = "deep/nested/ds2";
        v
    });
    assert_eq!(
        read(&c.root, "ds/manifest.json"),
        read(&c.root, "deep/nested/ds2/manifest.json")
    );
    assert_eq!(
        read(&c.root, "ds/images_train.f32"),
        read(&c.root, "deep/nested/ds2/images_train.f32")
    );
    assert_eq!(
        read(&c.root, "ds/reports_test.json"),
        read(&c.root, "deep/nested/ds2/reports_test.json")
    );
}

#[test]
fn gen_data_rejects_single_concept() {
    let c = ctx();
    let (code, err) = run_err(&c.root, &["gen-data", "--out", "bad_ds", "--k", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("at least 2 concepts"), "{err}");
}

#[test]
fn train_writes_artifacts_and_loss_falls() {
    let c = ctx();
    for f in ["loss.csv", "final.ckpt", "best.ckpt", "model.json", "train.json", "run.log"] {
        assert!(c.root.join("run_a").join(f).exists(), "missing {f}");
    }
    let csv = String::from_utf8(read(&c.root, "run_a/loss.csv")).unwrap();
    let totals: Vec<f64> = csv
        .lines()
        .skip(2) // config echo + header
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(totals.len() >= 20, "expected full loss log, got {}", totals.len());
    assert!(
        totals.last().unwrap() < totals.first().unwrap(),
        "loss did not fall: {} -> {}",
        totals.first().unwrap(),
        totals.last().unwrap()
    );
}

#[test]
fn same_seed_same_loss_curve_and_checkpoints() {
    let c = ctx();
    run_ok(&c.root, &train_args("run_b"));
    // echoes differ only in out_dir; compare everything after the echo line
    let tail = |rel: &str| {
        let text = String::from_utf8(read(&c.root, rel)).unwrap();
        text.lines().skip(1).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(tail("run_a/loss.csv"), tail("run_b/loss.csv"));
    assert_eq!(read(&c.root, "run_a/final.ckpt"), read(&c.root, "run_b/final.ckpt"));
    assert_eq!(read(&c.root, "run_a/best.ckpt"), read(&c.root, "run_b/best.ckpt"));
}

#[test]
fn eval_produces_flagged_reports_for_both_templates() {
    let c = ctx();
    let eval = |template: &str, out: &str| {
        run_ok(
            &c.root,
            &[
                "eval", "--dataset", "ds", "--out", out, "--checkpoint", "run_a/best.ckpt",
                "--template", template,
            ],
        )
    };
    let out1 = eval("p1", "ev");
    let out2 = eval("p2", "ev");
    assert!(String::from_utf8_lossy(&out1.stdout).contains("(aligned)"));
    assert!(String::from_utf8_lossy(&out2.stdout).contains("(free-form)"));

    let p1: serde_json::Value =
        serde_json::from_slice(&read(&c.root, "ev/eval_p1.json")).unwrap();
    let p2: serde_json::Value =
        serde_json::from_slice(&read(&c.root, "ev/eval_p2.json")).unwrap();
    assert_eq!(p1["aligned"], serde_json::Value::Bool(true));
    assert_eq!(p2["aligned"], serde_json::Value::Bool(false));
    assert!(p1["mean_auc"].as_f64().is_some());
    // config echo embedded in both artifact kinds
    assert!(p1["config_echo"]["seed"].is_u64());
    let csv = String::from_utf8(read(&c.root, "ev/eval_p1.csv")).unwrap();
    assert!(csv.starts_with("# config: "), "echo line missing: {csv}");

    // byte-identical on a second run
    let before = read(&c.root, "ev/eval_p1.json");
    eval("p1", "ev");
    assert_eq!(before, read(&c.root, "ev/eval_p1.json"));
}

#[test]
fn eval_rejects_unknown_template_naming_the_choices() {
    let c = ctx();
    let (code, err) = run_err(
        &c.root,
        &["eval", "--dataset", "ds", "--out", "ev_bad", "--checkpoint", "run_a/best.ckpt",
          "--template", "p9"],
    );
    assert_eq!(code, 2);
    assert!(err.contains("p1") && err.contains("p2"), "{err}");
}

#[test]
fn missing_dataset_is_a_data_error() {
    let c = ctx();
    let (code, _) = run_err(&c.root, &["train", "--dataset", "no_such_dir", "--out", "x"]);
    assert_eq!(code, 3);
}

#[test]
fn exploding_lr_exits_with_numeric_code_and_keeps_artifacts() {
    let c = ctx();
    let mut args = train_args("boom");
    args.extend_from_slice(&["--lr", "1e30"]);
    let out = bin().current_dir(&c.root).args(&args).output().expect("spawn");
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite"), "{err}");
    // last-good checkpoint retained and loadable
    assert!(c.root.join("boom/best.ckpt").exists());
    assert!(c.root.join("boom/loss.csv").exists());
}

#[test]
fn config_file_yields_to_flags() {
    let c = ctx();
    std::fs::write(
        c.root.join("cfg.json"),
        r#"{"dataset": "ds", "out_dir": "cfg_run", "d": 16, "heads": 2, "n_enc": 1,
            "epochs": 2, "batch_size": 16, "lr": 0.002}"#,
    )
    .unwrap();
    run_ok(&c.root, &["train", "--config", "cfg.json", "--epochs", "1"]);
    let summary: serde_json::Value =
        serde_json::from_slice(&read(&c.root, "cfg_run/train.json")).unwrap();
    assert_eq!(summary["config"]["epochs"], serde_json::json!(1)); // flag wins
    assert_eq!(summary["config"]["lr"], serde_json::json!(0.002)); // file wins
    assert_eq!(summary["config"]["seed"], serde_json::json!(42)); // default
}

#[test]
fn ablate_writes_one_row_per_cell_and_survives_failures() {
    let c = ctx();
    let mut args = vec![
        "ablate", "--dataset", "ds", "--out", "ab", "--variants", "linear,mlp", "--kv", "local",
    ];
    args.extend_from_slice(&["--dim", "16", "--heads", "2", "--n-enc", "1", "--epochs", "1",
                             "--batch-size", "16"]);
    run_ok(&c.root, &args);
    let csv = String::from_utf8(read(&c.root, "ab/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert!(rows[0].starts_with("linear,local,on,ok,"));
    assert!(rows[1].starts_with("mlp,local,on,ok,"));
}

#[test]
fn export_attn_writes_pgms_and_global_kv_refuses() {
    let c = ctx();
    run_ok(
        &c.root,
        &["export-attn", "--dataset", "ds", "--out", "maps", "--checkpoint", "run_a/best.ckpt",
          "--concept", "edema", "--samples", "0,3"],
    );
    let pgm = read(&c.root, "maps/attn_edema_test_0.pgm");
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"), "bad header");
    assert!(c.root.join("maps/attn_edema_test_3.pgm").exists());
    let index: serde_json::Value = serde_json::from_slice(&read(&c.root, "maps/export.json")).unwrap();
    assert_eq!(index["files"].as_array().unwrap().len(), 2);

    // a kv=global model has no local attention to draw
    let mut args = train_args("run_g");
    args.extend_from_slice(&["--kv-choice", "global"]);
    run_ok(&c.root, &args);
    let (code, err) = run_err(
        &c.root,
        &["export-attn", "--dataset", "ds", "--out", "maps_g", "--checkpoint", "run_g/best.ckpt",
          "--concept", "edema"],
    );
    assert_eq!(code, 1);
    assert!(err.contains("local keys"), "{err}");

    // unknown concept names the available ones
    let (code, err) = run_err(
        &c.root,
        &["export-attn", "--dataset", "ds", "--out", "maps_x", "--checkpoint", "run_a/best.ckpt",
          "--concept", "dragon"],
    );
    assert_eq!(code, 2);
    assert!(err.contains("edema"), "{err}");
}
