//! End-to-end tests driving the installed binary: exit codes, file
//! contracts, and byte-identical reruns.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gatiaa(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatiaa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, want: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(want),
        "{context}\nstdout:\n{}\nstderr:\n{}",
        stdout(out),
        stderr(out)
    );
}

/// Tiny synthetic dataset flags shared by the pipeline tests.
const TINY_SYNTH: &[&str] = &[
    "--set",
    "synth.feature_dim=6",
    "--set",
    "synth.grid_w=2..4",
    "--set",
    "synth.grid_h=2..3",
];

const TINY_MODEL: &[&str] = &[
    "--set",
    "model.variant=gat1_gatp",
    "--set",
    "model.d_in=6",
    "--set",
    "model.d_enc=8",
    "--set",
    "model.d_att=4",
    "--set",
    "model.heads=2",
    "--set",
    "model.d_dec=8",
    "--set",
    "model.drop_p=0.0",
];

fn dir_snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| (p.clone(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn synth_writes_graphs_manifest_and_identical_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let mut args = vec!["synth", "--count", "10", "--seed", "3", "--out", sub];
        args.extend_from_slice(TINY_SYNTH);
        let out = gatiaa(&args, tmp.path());
        assert_code(&out, 0, "synth");
        assert!(stdout(&out).contains("effective configuration:"));
        assert!(stdout(&out).contains("seed=3"));
    }
    let a = dir_snapshot(&tmp.path().join("a"));
    let b = dir_snapshot(&tmp.path().join("b"));
    assert_eq!(a.len(), 11, "10 graph files plus manifest.csv");
    // Same seed, same bytes, file by file.
    for ((pa, ba), (pb, bb)) in a.iter().zip(b.iter()) {
        assert_eq!(pa.file_name(), pb.file_name());
        assert_eq!(ba, bb, "{} differs between reruns", pa.display());
    }
    let manifest = std::fs::read_to_string(tmp.path().join("a/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 11, "header plus 10 rows");
}

#[test]
fn synth_split_fractions_hold_at_scale() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--count", "2000", "--seed", "1", "--out", "d"];
    // Minimal graphs: the split only looks at ids.
    args.extend_from_slice(&[
        "--set",
        "synth.feature_dim=2",
        "--set",
        "synth.grid_w=1..1",
        "--set",
        "synth.grid_h=1..1",
    ]);
    let out = gatiaa(&args, tmp.path());
    assert_code(&out, 0, "synth 2000");
    let manifest = std::fs::read_to_string(tmp.path().join("d/manifest.csv")).unwrap();
    let count = |s: &str| {
        manifest
            .lines()
            .filter(|l| l.ends_with(&format!(",{s}")))
            .count() as f64
    };
    let (tr, va, te) = (count("train"), count("val"), count("test"));
    assert_eq!(tr + va + te, 2000.0);
    assert!((tr / 2000.0 - 0.8).abs() <= 0.02, "train fraction {tr}");
    assert!((va / 2000.0 - 0.1).abs() <= 0.02, "val fraction {va}");
    assert!((te / 2000.0 - 0.1).abs() <= 0.02, "test fraction {te}");
}

#[test]
fn build_graph_concatenates_maps_and_names_bad_sidecars() {
    let tmp = tempfile::tempdir().unwrap();
    let write_map = |name: &str, d: usize, w: usize, h: usize| {
        let data: Vec<f32> = (0..d * w * h).map(|i| i as f32 * 0.25).collect();
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(tmp.path().join(name), bytes).unwrap();
        std::fs::write(
            tmp.path().join(format!("{name}.json")),
            format!("{{\"d\":{d},\"w\":{w},\"h\":{h}}}"),
        )
        .unwrap();
    };
    write_map("m0.f32", 5, 4, 3);
    write_map("m1.f32", 7, 4, 3);

    let out = gatiaa(
        &["build-graph", "m0.f32", "m1.f32", "--out", "g.afg"],
        tmp.path(),
    );
    assert_code(&out, 0, "build-graph");
    // Depths concatenate: 5 + 7 feature channels over a 4x3 grid.
    assert!(
        stdout(&out).contains("12 nodes (4x3 grid), 12 features per node"),
        "unexpected summary: {}",
        stdout(&out)
    );
    assert!(tmp.path().join("g.afg").exists());

    std::fs::write(tmp.path().join("m0.f32.json"), "{\"d\":5,\"w\":").unwrap();
    let bad = gatiaa(&["build-graph", "m0.f32", "--out", "h.afg"], tmp.path());
    assert_code(&bad, 2, "malformed sidecar");
    assert!(
        stderr(&bad).contains("m0.f32.json"),
        "error must name the sidecar: {}",
        stderr(&bad)
    );
}

/// One tiny dataset + training run, reused by the train/eval tests.
fn synth_and_train(tmp: &Path, epochs: &str) -> Output {
    let mut args = vec!["synth", "--count", "40", "--seed", "5", "--out", "data"];
    args.extend_from_slice(TINY_SYNTH);
    assert_code(&gatiaa(&args, tmp), 0, "synth for train");

    let epochs_arg = format!("train.epochs={epochs}");
    let mut targs = vec![
        "train",
        "--manifest",
        "data/manifest.csv",
        "--seed",
        "5",
        "--out",
        "run",
        "--set",
        &epochs_arg,
    ];
    targs.extend_from_slice(TINY_MODEL);
    targs.extend_from_slice(&[
        "--set",
        "train.batch_size=8",
        "--set",
        "train.lr0=0.001",
        "--set",
        "train.augment=false",
    ]);
    gatiaa(&targs, tmp)
}

#[test]
fn train_logs_each_epoch_and_resume_continues_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth_and_train(tmp.path(), "2");
    assert_code(&out, 0, "train");
    let text = stdout(&out);
    assert!(text.contains("epoch 0 lr"), "missing epoch 0: {text}");
    assert!(text.contains("epoch 1 lr"), "missing epoch 1: {text}");
    assert!(tmp.path().join("run/epoch_001.ckpt").exists());
    assert!(tmp.path().join("run/best.ckpt").exists());
    assert!(tmp.path().join("run/train_log.csv").exists());

    // Resume from the 2-epoch checkpoint with a 4-epoch budget: the log
    // must pick up at epoch 2, not restart at 0.
    let mut rargs = vec![
        "train",
        "--manifest",
        "data/manifest.csv",
        "--resume",
        "run/epoch_001.ckpt",
        "--seed",
        "5",
        "--out",
        "run2",
        "--set",
        "train.epochs=4",
        "--set",
        "train.batch_size=8",
        "--set",
        "train.lr0=0.001",
        "--set",
        "train.augment=false",
    ];
    rargs.extend_from_slice(TINY_MODEL);
    let resumed = gatiaa(&rargs, tmp.path());
    assert_code(&resumed, 0, "resume");
    let text = stdout(&resumed);
    assert!(
        !text.contains("epoch 0 lr") && !text.contains("epoch 1 lr"),
        "resumed run repeated finished epochs: {text}"
    );
    assert!(text.contains("epoch 2 lr"), "missing epoch 2: {text}");
    assert!(text.contains("epoch 3 lr"), "missing epoch 3: {text}");
    assert!(text.contains("train.start_epoch=2"), "echo: {text}");
}

#[test]
fn train_without_manifest_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gatiaa(&["train", "--manifest", "missing/manifest.csv"], tmp.path());
    assert_code(&out, 2, "missing manifest");
    assert!(
        stderr(&out).contains("manifest.csv"),
        "error must name the manifest: {}",
        stderr(&out)
    );
}

#[test]
fn eval_writes_reports_and_oracle_replay_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth_and_train(tmp.path(), "2");
    assert_code(&out, 0, "train for eval");

    let eargs = [
        "eval",
        "--checkpoint",
        "run/best.ckpt",
        "--manifest",
        "data/manifest.csv",
        "--out",
        "report",
        "--deterministic",
    ];
    let out = gatiaa(&eargs, tmp.path());
    assert_code(&out, 0, "eval");
    let metrics = std::fs::read_to_string(tmp.path().join("report/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\n"));
    let dist = std::fs::read_to_string(tmp.path().join("report/distributions.csv")).unwrap();
    assert_eq!(dist.lines().count(), 11, "header plus ten bins:\n{dist}");

    // Oracle replay: predictions are the labels; correlations must be 1.
    let oargs = [
        "eval",
        "--checkpoint",
        "run/best.ckpt",
        "--manifest",
        "data/manifest.csv",
        "--out",
        "oracle",
        "--set",
        "eval.oracle_replay=true",
    ];
    let out = gatiaa(&oargs, tmp.path());
    assert_code(&out, 0, "oracle replay");
    let metrics = std::fs::read_to_string(tmp.path().join("oracle/metrics.csv")).unwrap();
    assert!(metrics.contains("plcc,1\n"), "plcc must be exactly 1:\n{metrics}");
    assert!(metrics.contains("srcc,1\n"), "srcc must be exactly 1:\n{metrics}");
}

#[test]
fn eval_on_an_empty_split_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth_and_train(tmp.path(), "2");
    assert_code(&out, 0, "train for empty-split eval");
    // Rewrite every test row as train, leaving the test split empty.
    let path = tmp.path().join("data/manifest.csv");
    let rewritten: String = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| format!("{}\n", l.replace(",test", ",train")))
        .collect();
    std::fs::write(&path, rewritten).unwrap();

    let out = gatiaa(
        &[
            "eval",
            "--checkpoint",
            "run/best.ckpt",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "report",
        ],
        tmp.path(),
    );
    assert_code(&out, 2, "empty test split");
    assert!(
        stderr(&out).contains("no rows in the 'test' split"),
        "unexpected error: {}",
        stderr(&out)
    );
}

#[test]
fn ablate_emits_six_variant_rows_and_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let mut args = vec![
            "ablate",
            "--count",
            "40",
            "--seed",
            "2",
            "--out",
            sub,
            "--set",
            "train.epochs=1",
            "--set",
            "train.batch_size=8",
            "--set",
            "train.augment=false",
        ];
        args.extend_from_slice(TINY_MODEL);
        args.extend_from_slice(TINY_SYNTH);
        let out = gatiaa(&args, tmp.path());
        assert_code(&out, 0, "ablate");
    };
    run("t1");
    run("t2");
    let t1 = std::fs::read_to_string(tmp.path().join("t1/ablation.csv")).unwrap();
    let t2 = std::fs::read_to_string(tmp.path().join("t2/ablation.csv")).unwrap();
    assert_eq!(t1, t2, "same seed and budget must reproduce the table");
    let lines: Vec<&str> = t1.lines().collect();
    assert_eq!(lines[0], "variant,plcc,srcc");
    assert_eq!(lines.len(), 7, "header plus six variants:\n{t1}");
    for name in [
        "avg_pool_fc",
        "avg_pool_ed",
        "gcn_gmp",
        "gat1_gmp",
        "gat1_gatp",
        "gat3_gatp",
    ] {
        assert!(t1.contains(&format!("{name},")), "missing {name}:\n{t1}");
    }
}

#[test]
fn gradcheck_passes_normally_and_fails_with_a_corrupted_step() {
    let tmp = tempfile::tempdir().unwrap();
    // A reduced coordinate cap keeps this affordable; thresholds are unchanged.
    let out = gatiaa(&["gradcheck", "--max-coords", "6"], tmp.path());
    assert_code(&out, 0, "gradcheck");
    let text = stdout(&out);
    assert!(text.contains("max rel err"));
    assert!(text.contains("PASS"));
    assert!(!text.contains("FAIL"), "no unit may fail:\n{text}");

    // A half-step of 0.5 destroys the numeric derivative; the checker must
    // notice and exit 1.
    let out = gatiaa(
        &["gradcheck", "--max-coords", "4", "--step", "0.5"],
        tmp.path(),
    );
    assert_code(&out, 1, "corrupted step");
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gatiaa(
        &["synth", "--out", "x", "--set", "model.dropout=0.5"],
        tmp.path(),
    );
    assert_code(&out, 2, "unknown key");
    assert!(
        stderr(&out).contains("unknown config key 'model.dropout'"),
        "unexpected error: {}",
        stderr(&out)
    );

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "train.lr=0.1\n").unwrap();
    let out = gatiaa(
        &["synth", "--out", "x", "--config", cfg.to_str().unwrap()],
        tmp.path(),
    );
    assert_code(&out, 2, "unknown key in file");
}

#[test]
fn config_file_is_applied_and_flags_override_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# tiny dataset\nsynth.feature_dim = 2\nsynth.grid_w = 1..1\nsynth.grid_h = 1..1\nsynth.count = 7\nseed = 9\n",
    )
    .unwrap();
    let out = gatiaa(
        &[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            "g",
            "--set",
            "synth.count=5",
        ],
        tmp.path(),
    );
    assert_code(&out, 0, "synth from config");
    let text = stdout(&out);
    assert!(text.contains("synth.count=5"), "--set must override the file: {text}");
    assert!(text.contains("seed=9"), "file seed must apply: {text}");
    let manifest = std::fs::read_to_string(tmp.path().join("g/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 6, "header plus 5 rows");
}
