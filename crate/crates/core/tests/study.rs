use std::fs;
use std::path::Path;
use std::process::Command;

use eulerian_cutfem::stepper::{SchemeConfig, TRAJECTORY_HEADER};
use eulerian_cutfem::study::{
    compute_rates, read_errors, run_study, ErrorRow, ReferenceMode, StudyConfig, StudyPaths, ERRORS_HEADER,
};

fn tiny(lx: Vec<u32>, lt: Vec<u32>) -> StudyConfig {
    StudyConfig {
        lx,
        lt,
        scheme: SchemeConfig {
            t_end: 0.1,
            ..SchemeConfig::default()
        },
        reference: ReferenceMode::SelfConsistent,
        ..StudyConfig::default()
    }
}

fn synthetic(errors: impl Fn(u32, u32) -> f64) -> Vec<ErrorRow> {
    let mut rows = Vec::new();
    for lx in 0..3 {
        for lt in 0..4 {
            rows.push(ErrorRow {
                lx,
                lt,
                h: 0.1 / f64::from(1 << lx),
                dt: 0.02 / f64::from(1 << lt),
                err_velocity: errors(lx, lt),
                err_position: 0.0,
                observed_rate_t: None,
                observed_rate_x: None,
            });
        }
    }
    rows
}

#[test]
fn halving_and_quartering_errors_give_exact_rates() {
    let mut rows = synthetic(|lx, lt| 0.25f64.powi(lx as i32) * 0.5f64.powi(lt as i32));
    compute_rates(&mut rows, false);
    for r in &rows {
        assert_eq!(r.observed_rate_t, (r.lx == 2 && r.lt > 0).then_some(1.0));
        assert_eq!(r.observed_rate_x, (r.lt == 3 && r.lx > 0).then_some(2.0));
    }
    compute_rates(&mut rows, true);
    assert!(rows.iter().all(|r| r.observed_rate_t == (r.lt > 0).then_some(1.0)));
}

#[test]
fn failed_cells_are_excluded_from_rates() {
    let mut rows = synthetic(|lx, lt| if (lx, lt) == (2, 1) { f64::NAN } else { 0.5f64.powi((lx + lt) as i32) });
    compute_rates(&mut rows, false);
    let at = |lx, lt| rows.iter().find(|r| r.lx == lx && r.lt == lt).unwrap();
    assert_eq!(at(2, 1).observed_rate_t, None);
    assert_eq!(at(2, 2).observed_rate_t, None);
    assert_eq!(at(2, 3).observed_rate_t, Some(1.0));
}

#[test]
fn single_cell_has_no_rates() {
    let out = run_study(&tiny(vec![0], vec![0]), &StudyPaths::default()).unwrap();
    assert_eq!(out.rows.len(), 1);
    let r = &out.rows[0];
    assert!(r.observed_rate_t.is_none() && r.observed_rate_x.is_none());
    assert!(r.err_velocity > 0.0 && r.err_position > 0.0);
}

#[test]
fn study_outputs_are_deterministic_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let cfg = tiny(vec![0, 1], vec![0, 1]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        run_study(
            &cfg,
            &StudyPaths {
                out: Some(out.clone()),
                cache: Some(cache.clone()),
            },
        )
        .unwrap();
        out
    };
    let (a, b) = (run("a"), run("b"));
    let fresh = dir.path().join("c");
    run_study(
        &cfg,
        &StudyPaths {
            out: Some(fresh.clone()),
            cache: None,
        },
    )
    .unwrap();
    for name in ["errors.csv", "reference.csv", "run.json", "trajectory_Lx1_Lt1.csv"] {
        let first = fs::read(a.join(name)).unwrap();
        assert_eq!(first, fs::read(b.join(name)).unwrap(), "{name}");
        assert_eq!(first, fs::read(fresh.join(name)).unwrap(), "{name}");
    }
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 5);
}

fn check_outputs(dir: &Path, cells: &[(u32, u32)]) {
    let errors = fs::read_to_string(dir.join("errors.csv")).unwrap();
    let mut lines = errors.lines();
    assert_eq!(lines.next(), Some(ERRORS_HEADER));
    assert_eq!(lines.count(), cells.len());
    let rows = read_errors(errors.as_bytes()).unwrap();
    let order: Vec<(u32, u32)> = rows.iter().map(|r| (r.lx, r.lt)).collect();
    assert_eq!(order, cells);
    for &(lx, lt) in cells {
        let traj = fs::read_to_string(dir.join(format!("trajectory_Lx{lx}_Lt{lt}.csv"))).unwrap();
        assert_eq!(traj.lines().next(), Some(TRAJECTORY_HEADER));
    }
    let reference = fs::read_to_string(dir.join("reference.csv")).unwrap();
    assert_eq!(reference.lines().next(), Some(TRAJECTORY_HEADER));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["scheme"]["scheme"], "bdf2");
    assert_eq!(json["config"]["reference"], "self");
    assert_eq!(json["config"]["scheme"]["gamma_s"], 0.1);
    assert_eq!(json["cells"].as_array().unwrap().len(), cells.len());
}

#[test]
fn cli_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_study"))
        .args(["--scheme", "bdf2", "--bc", "lagrange", "--k", "2", "--lx", "0..1", "--lt", "0,1"])
        .args(["--gamma-s", "0.1", "--gamma-lambda", "0.01", "--c-delta", "2", "--tend", "0.1"])
        .args(["--reference", "self", "--out"])
        .arg(dir.path())
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success());
    check_outputs(dir.path(), &[(0, 0), (0, 1), (1, 0), (1, 1)]);
}

#[test]
fn cli_rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        vec!["--scheme", "bdf3"],
        vec!["--lx", "3..1"],
        vec!["--reference", "exact"],
        vec!["--c-delta", "0.5"],
    ] {
        let out = Command::new(env!("CARGO_BIN_EXE_study"))
            .args(&bad)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(!out.status.success(), "{bad:?}");
        assert!(!out.stderr.is_empty());
    }
    assert!(!dir.path().join("errors.csv").exists());
}
