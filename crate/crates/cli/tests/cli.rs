use std::path::Path;
use std::process::{Command, Output};

use patchpool_core::io::{read_token_grid, write_json};
use patchpool_core::pipeline::{export_synthetic, run_pipeline, BackendConfig, PipelineConfig};
use patchpool_core::synthbench::{generate_world, BiasedScorerParams, WorldSpec};
use patchpool_core::PoolMode;
use serde_json::Value;

fn patchpool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patchpool"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn run_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for path in [&a, &b] {
        let out = patchpool(&["run", "--seed", "5", "--report", p(path)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(x, y);
    let v: Value = serde_json::from_slice(&x).unwrap();
    let arms: Vec<&str> = v["arms"].as_array().unwrap().iter().map(|a| a["arm"].as_str().unwrap()).collect();
    assert_eq!(arms, ["baseline", "smoothed"]);
    assert_eq!(v["config"]["seed"], 5);
}

#[test]
fn alpha_zero_run_reports_equal_arms() {
    let out = patchpool(&["run", "--alpha", "0"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["arms"][0]["metrics"], v["arms"][1]["metrics"]);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"smoothing": {"tau": 0}}"#).unwrap();
    assert_eq!(code(&patchpool(&["run", "--config", p(&bad)])), 2);
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&patchpool(&["run", "--config", p(&bad)])), 2);
    assert_eq!(code(&patchpool(&["run", "--aggregation", "median"])), 2);
    assert_eq!(code(&patchpool(&["synth-run", "--bias", "0.5,0.5"])), 2);
}

/// Exported tensors through every file-level subcommand, checked against
/// the in-process pipeline on the same files.
#[test]
fn file_workflow_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = WorldSpec { n_items: 30, ..WorldSpec::default() };
    let world = generate_world(spec).unwrap();
    let backend = export_synthetic(&world, &BiasedScorerParams::new(0.5, 0.4, 0.1), 3, PoolMode::Q, d).unwrap();
    let config = PipelineConfig { backend: backend.clone(), m: 3, ..PipelineConfig::default() };
    let config_path = d.join("config.json");
    write_json(&config_path, &config).unwrap();
    let BackendConfig::File { gt_dir: Some(gt_dir), .. } = &backend else { unreachable!() };

    let retrieved = d.join("retrieved.json");
    let out = patchpool(&["retrieve", "--config", p(&config_path), "--out", p(&retrieved)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let pools = d.join("pools");
    let out = patchpool(&["pool", "--config", p(&config_path), "--retrieved", p(&retrieved), "--out-dir", p(&pools)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let preds = d.join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    let report = run_pipeline(&config).unwrap();
    for item in &report.items {
        let q = item.id.as_str();
        let smoothed = d.join(format!("{q}.smoothed-scores.pncl"));
        let out = patchpool(&[
            "smooth",
            "--config",
            p(&config_path),
            "--pool",
            p(&pools.join(format!("{q}.pool.pncl"))),
            "--query",
            p(&pools.join(format!("{q}.query.pncl"))),
            "--out",
            p(&smoothed),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let tokens = preds.join(format!("{q}.pncl"));
        assert_eq!(code(&patchpool(&["decode", "--scores", p(&smoothed), "--out", p(&tokens)])), 0);
        assert_eq!(read_token_grid(&tokens).unwrap().tokens, item.smoothed_tokens);
    }

    let eval = d.join("eval.json");
    let out = patchpool(&["eval", "--pred", p(&preds), "--gt", p(gt_dir), "--out", p(&eval)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&std::fs::read(&eval).unwrap()).unwrap();
    let want = report.mean("smoothed", "pixel_accuracy").unwrap();
    assert!((v["report"]["mean"].as_f64().unwrap() - want).abs() < 1e-12);
}

#[test]
fn corrupt_tensor_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let world = generate_world(WorldSpec { n_items: 10, ..WorldSpec::default() }).unwrap();
    export_synthetic(&world, &BiasedScorerParams::moderate(), 2, PoolMode::Q, dir.path()).unwrap();
    let gt = std::fs::read_dir(dir.path().join("gt")).unwrap().next().unwrap().unwrap().path();
    let mut bytes = std::fs::read(&gt).unwrap();
    let n = bytes.len();
    bytes[n - 6] ^= 0xff;
    std::fs::write(&gt, &bytes).unwrap();
    let out = patchpool(&["eval", "--pred", p(&gt), "--gt", p(&gt)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    std::fs::write(&gt, b"PNCL").unwrap();
    assert_eq!(code(&patchpool(&["eval", "--pred", p(&gt), "--gt", p(&gt)])), 3);
}

#[test]
fn mismatched_grids_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let make = |rows: usize, name: &str| {
        let world = generate_world(WorldSpec { rows, n_items: 10, ..WorldSpec::default() }).unwrap();
        export_synthetic(&world, &BiasedScorerParams::moderate(), 2, PoolMode::Q, &dir.path().join(name)).unwrap();
        std::fs::read_dir(dir.path().join(name).join("gt")).unwrap().next().unwrap().unwrap().path()
    };
    let (a, b) = (make(4, "a"), make(2, "b"));
    let out = patchpool(&["eval", "--pred", p(&a), "--gt", p(&b)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_run_reports_each_pool_size() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("synth.json");
    let out = patchpool(&[
        "synth-run", "--seed", "11", "--rows", "3", "--cols", "3", "--codebook", "8", "--items", "50",
        "--bias", "0.45,0.45,0.1", "--m", "1,2,4", "--k", "2", "--alpha", "0.9", "--tau", "0.5",
        "--report", p(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(v["world"]["seed"], 11);
    assert_eq!(v["world"]["codebook_size"], 8);
    let configs = v["configs"].as_array().unwrap();
    assert_eq!(configs.len(), 3);
    assert_eq!(configs[1]["config"]["k"], 2);
    assert_eq!(configs[1]["config"]["alpha"], 0.9);
    assert!(v["rng"].as_str().unwrap().contains("ChaCha8"));
}

#[test]
fn bench_emits_stage_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = patchpool(&["bench", "--m", "1,2", "--repeat", "1", "--csv", p(&csv)]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let stages: Vec<&str> = rows[0]["stages"].as_array().unwrap().iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(stages, ["load", "retrieve", "pool", "score", "smooth", "decode", "eval"]);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("m,stage,seconds,peak_rss_kib\n"));
}
