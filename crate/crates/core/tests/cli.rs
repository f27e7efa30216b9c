use std::path::Path;
use std::process::Command;

use mixerforge::costmodel::CostRow;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mixerforge"));
    c.env_remove("MIXERFORGE_THREADS");
    c
}

fn run(args: &[&str]) -> i32 {
    bin().args(args).output().expect("binary runs").status.code().expect("exit code")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn rows(path: &Path) -> Vec<CostRow> {
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .collect::<Result<_, _>>()
        .unwrap()
}

const TINY: &[&str] = &[
    "--set", "task.vocab=8",
    "--set", "task.seq_len=7",
    "--set", "task.pairs=2",
    "--set", "task.queries=2",
    "--set", "model.d_model=8",
    "--set", "model.heads=2",
    "--set", "optimizer.total_steps=15",
    "--set", "options.batch_size=4",
    "--set", "options.eval_examples=16",
];

#[test]
fn equiv_default_passes_and_writes_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["equiv", "--out", &out_arg(dir.path())]), 0);
    let mut r = csv::Reader::from_path(dir.path().join("equiv.csv")).unwrap();
    let records: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 9 + 3);
    for rec in &records[..9] {
        let err: f64 = rec[2].parse().unwrap();
        assert!(err <= 1e-10, "{rec:?}");
    }
    assert!(dir.path().join("effective_config.json").exists());
}

#[test]
fn equiv_fault_injection_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["equiv", "--fault", "--set", "trials=5", "--out", &out_arg(dir.path())]), 1);
}

#[test]
fn equiv_empty_kind_list_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert_eq!(run(&["equiv", "--kinds", "", "--out", &out]), 2);
    assert_eq!(run(&["equiv", "--set", "kinds=[]", "--out", &out]), 2);
    assert_eq!(run(&["equiv", "--kinds", "gla,deltanet", "--set", "trials=3", "--out", &out]), 0);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"trials": 3, "unknown": 1}"#).unwrap();
    assert_eq!(run(&["equiv", "--config", cfg.to_str().unwrap(), "--out", &out]), 2);
    std::fs::write(&cfg, "{not json").unwrap();
    assert_eq!(run(&["flops", "--config", cfg.to_str().unwrap(), "--out", &out]), 2);
    assert_eq!(run(&["flops", "--set", "nokey", "--out", &out]), 2);
    assert_eq!(run(&["bogus"]), 2);
    let status = bin()
        .env("MIXERFORGE_THREADS", "zero")
        .args(["equiv", "--set", "trials=1", "--out", &out])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn config_file_values_and_overrides_are_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"trials": 3, "len": 9}"#).unwrap();
    let out = dir.path().join("o");
    let code = run(&["equiv", "--config", cfg.to_str().unwrap(), "--set", "len=5", "--seed", "4", "--out", &out_arg(&out)]);
    assert_eq!(code, 0);
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(echo["config"]["trials"], 3);
    assert_eq!(echo["config"]["len"], 5);
    assert_eq!(echo["seed"], 4);
    assert_eq!(echo["command"], "equiv");
}

#[test]
fn flops_curves_are_monotone_with_hgrn_cheapest() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&[
        "flops", "--out", &out_arg(dir.path()),
        "--set", r#"kinds=["hgrn","gla","hgrn2","softmax"]"#,
        "--set", "d_model=256", "--set", "heads=4",
    ]);
    assert_eq!(code, 0);
    let all = rows(&dir.path().join("flops.csv"));
    let curve = |k: &str| -> Vec<u128> {
        all.iter().filter(|r| r.kind == k && r.label == "layer").map(|r| r.per_sequence_flops).collect()
    };
    let lens: Vec<usize> = all.iter().filter(|r| r.kind == "hgrn").map(|r| r.len).collect();
    assert_eq!(lens, (8..=15).map(|p| 1usize << p).collect::<Vec<_>>());
    for k in ["hgrn", "gla", "softmax"] {
        assert!(curve(k).windows(2).all(|w| w[0] < w[1]), "{k}");
    }
    for i in 0..lens.len() {
        assert!(curve("hgrn")[i] < curve("gla")[i] && curve("hgrn")[i] < curve("softmax")[i]);
    }
    assert_eq!(curve("hgrn2"), curve("gla"));
}

#[test]
fn flops_ratio_sweep_gives_five_rows_per_kind() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&[
        "flops", "--out", &out_arg(dir.path()),
        "--set", r#"kinds=["gla","deltanet","softmax"]"#,
        "--set", r#"ratios=[24,12,6,3,"pure"]"#,
        "--set", "lens=[1024]",
    ]);
    assert_eq!(code, 0);
    let all = rows(&dir.path().join("flops.csv"));
    for k in ["gla", "deltanet"] {
        let model: Vec<&CostRow> = all.iter().filter(|r| r.kind == k && r.label == "model").collect();
        assert_eq!(model.len(), 5, "{k}");
    }
    assert!(all.iter().all(|r| r.kind != "softmax" || r.label == "layer"));
}

fn dominated_by_any(p: (f64, f64), pts: &[(f64, f64)]) -> bool {
    pts.iter().any(|q| q.0 <= p.0 && q.1 >= p.1 && (q.0 < p.0 || q.1 > p.1))
}

#[test]
fn pareto_sweep_grid_and_frontier_are_consistent_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let mut args = vec!["pareto", "--out"];
    let out_s = out_arg(&out);
    args.push(&out_s);
    args.extend_from_slice(TINY);
    assert_eq!(run(&args), 0);
    let grid = rows(&out.join("grid.csv"));
    let front = rows(&out.join("frontier.csv"));
    assert_eq!(grid.len(), 2);
    let pts: Vec<(f64, f64)> = grid.iter().map(|r| (r.per_sequence_flops as f64, r.score.unwrap())).collect();
    for r in &front {
        assert!(grid.contains(r));
        assert!(!dominated_by_any((r.per_sequence_flops as f64, r.score.unwrap()), &pts));
    }
    for (r, p) in grid.iter().zip(&pts) {
        if !front.contains(r) {
            assert!(dominated_by_any(*p, &pts));
        }
    }
    let neither = !dominated_by_any(pts[0], &pts) && !dominated_by_any(pts[1], &pts);
    assert_eq!(front.len() == 2, neither);

    let again = dir.path().join("b");
    let again_s = out_arg(&again);
    args[2] = &again_s;
    assert_eq!(run(&args), 0);
    for f in ["grid.csv", "frontier.csv", "summary.csv", "cells/hgrn2_3-1/report.json", "cells/hgrn2_3-1/model.ckpt"] {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn failed_cells_are_recorded_and_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out_s = out_arg(dir.path());
    let mut args = vec!["train", "--out", &out_s, "--set", "optimizer.base_lr=1e300", "--set", "optimizer.min_lr=1e299"];
    args.extend_from_slice(TINY);
    assert_eq!(run(&args), 1);
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.matches(",failed,").count(), 2, "{summary}");
    assert!(dir.path().join("cells/hgrn2_pure_linear/error.txt").exists());
}

#[test]
fn report_describes_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(&[
        "report", "--out", &out_arg(dir.path()),
        "--set", "model.blocks=2", "--set", "model.d_model=64", "--set", "model.vocab=100",
        "--set", "lens=[128,256]",
    ]);
    assert_eq!(code, 0);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(r["schedule"], "LLLFLLLF");
    assert_eq!(r["lengths"].as_array().unwrap().len(), 2);
    let kv = |i: usize| r["lengths"][i]["kv_cache_bytes"].as_u64().unwrap();
    assert_eq!(kv(1), 2 * kv(0));
}
