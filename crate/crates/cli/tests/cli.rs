use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use xseg_core::phantom::{generate_phantom, PhantomSpec};
use xseg_core::pipeline::{load_metrics, round_dir, train_config_for_round, PipelineConfig};
use xseg_core::predictor::{ModelParams, FEATURE_COUNT, POINT_FEATURE};
use xseg_core::volume::io::{load_mask, load_prob, read_raw};

fn xseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xseg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = xseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|e| {
        panic!("{e}: {}", String::from_utf8_lossy(&out.stderr))
    })
}

#[test]
fn eval_of_a_mask_with_itself_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let (img, mask) = (dir.path().join("img"), dir.path().join("mask.vvol"));
    ok(&["phantom", "--image", s(&img), "--mask", s(&mask)]);
    let v = ok(&["eval", s(&mask), s(&mask)]);
    assert_eq!(v["dice"], 1.0);
    let (_, gt) = generate_phantom(&PhantomSpec::default()).unwrap();
    assert_eq!(load_mask(&mask).unwrap(), gt);
}

#[test]
fn rw_on_the_uniform_line_splits_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prob");
    ok(&[
        "rw",
        s(&fixture("line3_image.vvol")),
        s(&fixture("line3_seeds.vvol")),
        "--out",
        s(&out),
    ]);
    let p = load_prob(&out).unwrap();
    assert_eq!(p.dims(), [1, 1, 3]);
    assert_eq!(p.get(0, 0, 0), 1.0);
    assert!((p.get(0, 0, 1) - 0.5).abs() < 1e-6);
    assert_eq!(p.get(0, 0, 2), 0.0);
    // any beta keeps the symmetry
    ok(&["rw", s(&fixture("line3_image")), s(&fixture("line3_seeds")), "--out", s(&out), "--beta", "5", "--tol", "1e-10"]);
    assert!((load_prob(&out).unwrap().get(0, 0, 1) - 0.5).abs() < 1e-6);
}

#[test]
fn click_to_mask_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["phantom", "--image", s(&p("img")), "--mask", s(&p("gt"))]);
    ok(&["simulate-points", s(&p("gt")), "--out", s(&p("pts.json")), "--jitter-sigma", "0"]);
    let seeds = ok(&["scribble", s(&p("img")), s(&p("pts.json")), "--out", s(&p("seeds"))]);
    assert_eq!(seeds["bg_radius"], 15);
    assert!(seeds["foreground"].as_u64().unwrap() > 0);
    ok(&["rw", s(&p("img")), s(&p("seeds")), "--out", s(&p("prob"))]);
    let d = ok(&["eval", s(&p("prob")), s(&p("gt"))])["dice"].as_f64().unwrap();
    assert!(d > 0.9, "{d}");

    ok(&["simulate-points", s(&p("gt")), "--out", s(&p("j1.json")), "--seed", "4"]);
    ok(&["simulate-points", s(&p("gt")), "--out", s(&p("j2.json")), "--seed", "4"]);
    ok(&["simulate-points", s(&p("gt")), "--out", s(&p("j3.json")), "--seed", "5"]);
    assert_eq!(fs::read(p("j1.json")).unwrap(), fs::read(p("j2.json")).unwrap());
    assert_ne!(fs::read(p("j1.json")).unwrap(), fs::read(p("j3.json")).unwrap());

    ok(&["phantom", "--image", s(&p("bean")), "--mask", s(&p("bean_gt")), "--shape", "bean", "--seed", "2"]);
    assert_ne!(load_mask(p("bean_gt")).unwrap(), load_mask(p("gt")).unwrap());
}

#[test]
fn errors_are_json_with_distinct_exit_codes() {
    for args in [
        vec!["frobnicate"],
        vec!["eval", "only-one"],
        vec!["rw", "a", "b", "--out", "c", "--beta", "steep"],
        vec![],
    ] {
        let out = xseg(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(stderr_json(&out)["code"], "usage");
    }
    let out = xseg(&["eval", "/does/not/exist", "/does/not/exist"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["code"], "runtime");
    assert!(err["message"].as_str().unwrap().contains("/does/not/exist"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("m.json");
    fs::write(&bad, r#"{"cases": []}"#).unwrap();
    let out = xseg(&["pipeline", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("train case"));

    let help = xseg(&["--help"]);
    assert!(help.status.success());
    let text = String::from_utf8(help.stdout).unwrap();
    for cmd in ["phantom", "simulate-points", "scribble", "rw", "pipeline", "eval", "serve", "respond"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let pipeline_help = String::from_utf8(xseg(&["pipeline", "--help"]).stdout).unwrap();
    for flag in ["--no-rw", "--no-point-channel", "--alpha", "--resume", "--out", "--seed"] {
        assert!(pipeline_help.contains(flag), "{flag}");
    }
}

fn run_pipeline(out: &Path, extra: &[&str]) -> Value {
    let manifest = fixture("small_manifest.json");
    let mut args = vec!["pipeline", s(&manifest), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args)
}

fn run_info(out: &Path) -> Value {
    serde_json::from_slice(&fs::read(out.join("run.json")).unwrap()).unwrap()
}

fn files_equal(a: &Path, b: &Path) {
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{}", a.display());
}

const IDS: [&str; 3] = ["a", "b", "v"];

fn labels_equal(a: &Path, b: &Path, rounds: usize) {
    for r in 0..=rounds {
        for id in IDS {
            files_equal(&round_dir(a, r).join(format!("{id}.raw")), &round_dir(b, r).join(format!("{id}.raw")));
        }
    }
}

fn params(out: &Path, round: usize) -> ModelParams {
    serde_json::from_slice(&fs::read(round_dir(out, round).join("params.json")).unwrap()).unwrap()
}

/// Input weights of the point feature.
fn point_row(p: &ModelParams) -> &[f64] {
    &p.input_weights[POINT_FEATURE * p.hidden..(POINT_FEATURE + 1) * p.hidden]
}

#[test]
fn pipeline_writes_rounds_metrics_and_run_info() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let summary = run_pipeline(&out, &[]);
    assert_eq!(summary["rounds"], 3);
    let metrics = load_metrics(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.iter().map(|m| m.round).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(metrics[0].validation.mean.unwrap() >= 0.8);
    let info = run_info(&out);
    let cfg: PipelineConfig = serde_json::from_value(info["config"].clone()).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.max_rounds, 2);
    assert_eq!(info["variant"]["rw_regularization"], true);
    assert_eq!(info["cases"][2]["role"], "val");
    for id in IDS {
        assert!(out.join("final").join(format!("{id}_mask.json")).exists());
    }

    // flags override the manifest
    let other = dir.path().join("seeded");
    run_pipeline(&other, &["--seed", "11", "--max-rounds", "1"]);
    let cfg: PipelineConfig = serde_json::from_value(run_info(&other)["config"].clone()).unwrap();
    assert_eq!((cfg.seed, cfg.max_rounds), (11, 1));
    assert_eq!(load_metrics(other.join("metrics.jsonl")).unwrap().len(), 2);
}

#[test]
fn pipeline_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_pipeline(&a, &[]);
    run_pipeline(&b, &[]);
    files_equal(&a.join("metrics.jsonl"), &b.join("metrics.jsonl"));
    files_equal(&a.join("run.json"), &b.join("run.json"));
    labels_equal(&a, &b, 2);
    for id in IDS {
        files_equal(&a.join(format!("final/{id}_prob.raw")), &b.join(format!("final/{id}_prob.raw")));
    }
}

#[test]
fn resume_extends_a_finished_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    run_pipeline(&full, &[]);
    run_pipeline(&part, &["--max-rounds", "1"]);
    assert_eq!(load_metrics(part.join("metrics.jsonl")).unwrap().len(), 2);
    run_pipeline(&part, &["--resume"]);
    files_equal(&full.join("metrics.jsonl"), &part.join("metrics.jsonl"));
    labels_equal(&full, &part, 2);

    let out = xseg(&["pipeline", s(&fixture("small_manifest.json")), "--out", s(&part), "--resume", "--alpha", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("different configuration"));
}

#[test]
fn ablation_flags_switch_code_paths() {
    let dir = tempfile::tempdir().unwrap();
    let base = dir.path().join("base");
    let no_rw = dir.path().join("no_rw");
    let no_pc = dir.path().join("no_pc");
    let alpha0 = dir.path().join("alpha0");
    let all = dir.path().join("all");
    run_pipeline(&base, &[]);
    run_pipeline(&no_rw, &["--no-rw"]);
    run_pipeline(&no_pc, &["--no-point-channel"]);
    run_pipeline(&alpha0, &["--alpha", "0"]);
    run_pipeline(&all, &["--no-rw", "--no-point-channel", "--alpha", "0"]);

    let variant = |out: &Path| run_info(out)["variant"].clone();
    assert_eq!(variant(&base), serde_json::json!({ "rw_regularization": true, "point_channel": true, "alpha": 2.0 }));
    assert_eq!(variant(&no_rw)["rw_regularization"], false);
    assert_eq!(variant(&no_pc)["point_channel"], false);
    assert_eq!(variant(&alpha0)["alpha"], 0.0);
    assert_eq!(variant(&all), serde_json::json!({ "rw_regularization": false, "point_channel": false, "alpha": 0.0 }));
    for out in [&base, &no_rw, &no_pc, &alpha0, &all] {
        let v = variant(out);
        for m in load_metrics(out.join("metrics.jsonl")).unwrap() {
            assert_eq!(serde_json::to_value(m.variant).unwrap(), v);
        }
    }

    // without regularization the next labels are hardened predictions
    for out in [&no_rw, &all] {
        for r in 1..=2 {
            for id in IDS {
                let p = load_prob(round_dir(out, r).join(format!("{id}.vvol"))).unwrap();
                assert!(p.data().iter().all(|&x| x == 0.0 || x == 1.0));
            }
        }
    }
    let soft = load_prob(round_dir(&base, 1).join("a.vvol")).unwrap();
    assert!(soft.data().iter().any(|&x| x > 0.0 && x < 1.0));
    for r in 0..=2 {
        assert_eq!(load_metrics(base.join("metrics.jsonl")).unwrap()[r].band_voxels > 0, r > 0);
    }

    // a zero point column never moves its weights off their initialization
    let cfg: PipelineConfig = serde_json::from_value(run_info(&no_pc)["config"].clone()).unwrap();
    for r in 1..=2 {
        let seed = train_config_for_round(&cfg, r).seed;
        let init = ModelParams::init(FEATURE_COUNT, cfg.train.hidden, seed);
        assert_eq!(point_row(&params(&no_pc, r)), point_row(&init));
        assert_ne!(point_row(&params(&base, r)), point_row(&init));
    }

    // alpha only enters through the loss, so round 1 starts from the same labels
    labels_equal_round(&base, &alpha0, 0);
    assert_ne!(params(&base, 1).input_weights, params(&alpha0, 1).input_weights);
}

fn labels_equal_round(a: &Path, b: &Path, r: usize) {
    for id in IDS {
        files_equal(&round_dir(a, r).join(format!("{id}.raw")), &round_dir(b, r).join(format!("{id}.raw")));
    }
}

#[test]
fn subprocess_reference_predictor_matches_in_process_training() {
    let dir = tempfile::tempdir().unwrap();
    let inside = dir.path().join("inside");
    let outside = dir.path().join("outside");
    let exchange = dir.path().join("exchange");
    run_pipeline(&inside, &[]);
    let responder = Command::new(env!("CARGO_BIN_EXE_xseg"))
        .args(["respond", s(&exchange), "--max-requests", "2", "--poll-ms", "5", "--idle-timeout", "300"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    run_pipeline(&outside, &["--external-dir", s(&exchange)]);
    let done = responder.wait_with_output().unwrap();
    assert!(done.status.success());
    let answered: Value = serde_json::from_slice(&done.stdout).unwrap();
    assert_eq!(answered["answered"], 2);

    labels_equal(&inside, &outside, 2);
    let a = load_metrics(inside.join("metrics.jsonl")).unwrap();
    let b = load_metrics(outside.join("metrics.jsonl")).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.validation, y.validation);
        assert_eq!(x.train_fit, y.train_fit);
    }
    assert!(!round_dir(&outside, 1).join("params.json").exists());
    let (header, _) = read_raw(exchange.join("pred_v.vvol")).unwrap();
    assert_eq!(header.dims, [24, 24, 24]);
}
