//! End-to-end tests that drive the compiled binary the way a shell user
//! would: every subcommand, the exit-code taxonomy, and the determinism
//! guarantees (seeded byte-identical outputs, config round-trips).

use spikepiv_core::flow::read_flo;
use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikepiv"))
        .args(args)
        .output()
        .expect("binary must spawn")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    run(args).status.code().expect("process must exit normally")
}

/// Every file under `root` as relative path -> bytes.
fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("path under root")
                    .to_string_lossy()
                    .into_owned();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// A small config that shrinks the stock uniform-shift scene so the suite
/// stays fast.
fn small_scene_cfg(dir: &Path) -> String {
    let path = dir.join("small.cfg");
    std::fs::write(&path, "height=32\nwidth=32\n").unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn generate_is_byte_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scene_cfg(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&[
            "generate",
            "--preset",
            "uniform_shift",
            "--config",
            &cfg,
            "--out",
            &out.to_string_lossy(),
            "--n",
            "2",
            "--seed",
            "7",
        ]);
    }
    let ta = tree_bytes(&a);
    let tb = tree_bytes(&b);
    assert_eq!(
        ta.keys().collect::<Vec<_>>(),
        tb.keys().collect::<Vec<_>>(),
        "both runs must emit the same file set"
    );
    for (name, bytes) in &ta {
        assert_eq!(
            Some(bytes),
            tb.get(name),
            "{name} must be byte-identical across seeded runs"
        );
    }
    assert!(
        ta.keys().any(|k| k.ends_with("source.spk")),
        "sample directories must hold spike streams"
    );
}

#[test]
fn effective_config_reproduces_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scene_cfg(dir.path());
    let first = dir.path().join("first");
    run_ok(&[
        "generate",
        "--preset",
        "uniform_shift",
        "--config",
        &cfg,
        "--out",
        &first.to_string_lossy(),
        "--n",
        "2",
        "--seed",
        "9",
    ]);
    // Re-run purely from the effective config the first run wrote.
    let second = dir.path().join("second");
    run_ok(&[
        "generate",
        "--config",
        &first.join("scene.cfg").to_string_lossy(),
        "--out",
        &second.to_string_lossy(),
    ]);
    assert_eq!(
        tree_bytes(&first),
        tree_bytes(&second),
        "regenerating from the written effective config must reproduce every byte"
    );
}

#[test]
fn estimate_xcorr_matches_ground_truth_on_interior() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    run_ok(&[
        "generate",
        "--preset",
        "uniform_shift",
        "--out",
        &ds.to_string_lossy(),
        "--n",
        "1",
        "--seed",
        "7",
    ]);
    let sample = ds.join("sample_000000");
    let est = dir.path().join("est");
    run_ok(&[
        "estimate",
        "--method",
        "xcorr",
        "--sample",
        &sample.to_string_lossy(),
        "--out",
        &est.to_string_lossy(),
    ]);
    let pred = read_flo(&est.join("sample_000000.flo")).unwrap();
    let gt = read_flo(&sample.join("flow.flo")).unwrap();
    assert_eq!((pred.height, pred.width), (gt.height, gt.width));
    let margin = 16;
    let mut err = 0.0;
    let mut n = 0usize;
    for y in margin..gt.height - margin {
        for x in margin..gt.width - margin {
            let (pu, pv) = pred.at(y, x);
            let (gu, gv) = gt.at(y, x);
            err += ((pu - gu).powi(2) + (pv - gv).powi(2)).sqrt();
            n += 1;
        }
    }
    let mean = err / n as f64;
    assert!(
        mean < 0.15,
        "interior endpoint error {mean:.4} px too large for a uniform integer shift"
    );
    assert!(
        est.join("estimate.cfg").exists(),
        "estimate must write its effective config"
    );
}

#[test]
fn single_thread_run_matches_default_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_scene_cfg(dir.path());
    let ds = dir.path().join("ds");
    run_ok(&[
        "generate",
        "--preset",
        "uniform_shift",
        "--config",
        &cfg,
        "--out",
        &ds.to_string_lossy(),
        "--n",
        "1",
        "--seed",
        "3",
    ]);
    let (ea, eb) = (dir.path().join("ea"), dir.path().join("eb"));
    run_ok(&[
        "estimate",
        "--method",
        "xcorr",
        "--dataset",
        &ds.to_string_lossy(),
        "--out",
        &ea.to_string_lossy(),
    ]);
    run_ok(&[
        "--threads",
        "1",
        "estimate",
        "--method",
        "xcorr",
        "--dataset",
        &ds.to_string_lossy(),
        "--out",
        &eb.to_string_lossy(),
    ]);
    assert_eq!(
        std::fs::read(ea.join("sample_000000.flo")).unwrap(),
        std::fs::read(eb.join("sample_000000.flo")).unwrap(),
        "thread count must not change results"
    );
}

#[test]
fn train_then_learned_estimate_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let cfg_path = dir.path().join("tiny.cfg");
    std::fs::write(&cfg_path, "height=32\nwidth=32\n").unwrap();
    run_ok(&[
        "generate",
        "--preset",
        "uniform_shift",
        "--config",
        &cfg_path.to_string_lossy(),
        "--out",
        &ds.to_string_lossy(),
        "--n",
        "4",
        "--seed",
        "5",
    ]);

    let train_cfg = dir.path().join("train.cfg");
    std::fs::write(&train_cfg, "train_iterations=2\ntrain_batch=2\n").unwrap();
    let ckpt = dir.path().join("model.ckpt");
    run_ok(&[
        "train",
        "--dataset",
        &ds.to_string_lossy(),
        "--config",
        &train_cfg.to_string_lossy(),
        "--out",
        &ckpt.to_string_lossy(),
        "--seed",
        "11",
    ]);
    assert!(ckpt.exists(), "training must write the checkpoint");
    assert!(
        dir.path().join("model.ckpt.loss.csv").exists(),
        "training must write the loss curve"
    );
    let csv = std::fs::read_to_string(dir.path().join("model.ckpt.loss.csv")).unwrap();
    assert!(csv.starts_with("iteration,"), "loss csv must carry a header");
    assert_eq!(csv.trim().lines().count(), 3, "two optimizer steps -> two rows");

    let est = dir.path().join("est");
    run_ok(&[
        "estimate",
        "--method",
        "siv",
        "--ckpt",
        &ckpt.to_string_lossy(),
        "--dataset",
        &ds.to_string_lossy(),
        "--out",
        &est.to_string_lossy(),
    ]);
    let pred = read_flo(&est.join("sample_000000.flo")).unwrap();
    assert_eq!((pred.height, pred.width), (32, 32), "learned field is full resolution");

    let eval = run_ok(&[
        "eval",
        "--dataset",
        &ds.to_string_lossy(),
        "--methods",
        "xcorr,hs,siv",
        "--ckpt",
        &ckpt.to_string_lossy(),
    ]);
    let table = String::from_utf8_lossy(&eval.stdout);
    for needle in ["xcorr", "variational", "siv", "average"] {
        assert!(table.contains(needle), "eval table must mention {needle}:\n{table}");
    }
}

#[test]
fn eval_without_methods_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--dataset", &dir.path().to_string_lossy()]);
    assert_eq!(out.status.code(), Some(1), "missing --methods is a usage error");
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("methods"), "usage message should name the flag:\n{msg}");
}

#[test]
fn failure_classes_map_to_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.flo");
    let png = dir.path().join("nope.png");

    // 1: bad usage (unknown flag).
    assert_eq!(exit_code(&["generate", "--bogus-flag"]), 1);
    // 2: I/O failure (input file does not exist).
    assert_eq!(
        exit_code(&["viz", "--flow", &missing.to_string_lossy(), "--out", &png.to_string_lossy()]),
        2
    );
    // 3: validation failure (unknown method name).
    let ds = dir.path().to_string_lossy().into_owned();
    assert_eq!(
        exit_code(&["estimate", "--method", "warp9", "--dataset", &ds, "--out", &ds]),
        3
    );
    // 3: validation failure (neither --sample nor --dataset).
    assert_eq!(exit_code(&["estimate", "--method", "xcorr", "--out", &ds]), 3);
    // 0: help is not an error.
    assert_eq!(exit_code(&["--help"]), 0);
}

#[test]
fn version_names_the_file_formats() {
    let out = run_ok(&["--version"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in ["PSSD", "SIVW", "202021.25"] {
        assert!(text.contains(needle), "--version must name format {needle}:\n{text}");
    }
}

#[test]
fn viz_renders_a_png() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let cfg = small_scene_cfg(dir.path());
    run_ok(&[
        "generate",
        "--preset",
        "uniform_shift",
        "--config",
        &cfg,
        "--out",
        &ds.to_string_lossy(),
        "--n",
        "1",
        "--seed",
        "2",
    ]);
    let png = dir.path().join("flow.png");
    run_ok(&[
        "viz",
        "--flow",
        &ds.join("sample_000000").join("flow.flo").to_string_lossy(),
        "--out",
        &png.to_string_lossy(),
    ]);
    let bytes = std::fs::read(&png).unwrap();
    assert_eq!(&bytes[..4], b"\x89PNG", "output must be a PNG file");
}

#[test]
fn selftest_reports_all_diagnostics_green() {
    let out = run_ok(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[PASS]"), "selftest should list passing diagnostics:\n{text}");
    assert!(!text.contains("[FAIL]"), "no diagnostic may fail:\n{text}");
}
