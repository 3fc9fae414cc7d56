//! Space-time convergence studies against a reference trajectory.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ale::{run_reference, AleConfig};
use crate::error::{Error, Result};
use crate::stepper::{fmt_sig, read_trajectory, write_trajectory, BcMode, Scheme, SchemeConfig, Simulation, TrajectoryRow};

pub const ERRORS_HEADER: &str = "Lx,Lt,h,dt,err_velocity,err_position,observed_rate_t,observed_rate_x";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// Fitted-mesh ALE solver.
    Ale,
    /// Eulerian BDF2 run on the finest mesh.
    #[serde(rename = "self")]
    #[value(name = "self")]
    SelfConsistent,
}

impl fmt::Display for ReferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ale => "ale",
            Self::SelfConsistent => "self",
        })
    }
}

impl FromStr for ReferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ale" => Ok(Self::Ale),
            "self" => Ok(Self::SelfConsistent),
            _ => Err(Error::Parse(format!("unknown reference mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub h0: f64,
    pub dt0: f64,
    pub lx: Vec<u32>,
    pub lt: Vec<u32>,
    /// Everything except `h` and `dt`, which come from the levels.
    pub scheme: SchemeConfig,
    pub reference: ReferenceMode,
    /// Rates between all adjacent cells instead of the two slices only.
    pub full_grid_rates: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            h0: 0.1,
            dt0: 1.0 / 50.0,
            lx: (0..=3).collect(),
            lt: (0..=4).collect(),
            scheme: SchemeConfig::default(),
            reference: ReferenceMode::Ale,
            full_grid_rates: false,
        }
    }
}

impl StudyConfig {
    pub fn h(&self, lx: u32) -> f64 {
        self.h0 * 0.5f64.powi(lx as i32)
    }

    pub fn dt(&self, lt: u32) -> f64 {
        self.dt0 * 0.5f64.powi(lt as i32)
    }

    pub fn cell(&self, lx: u32, lt: u32) -> SchemeConfig {
        SchemeConfig {
            h: self.h(lx),
            dt: self.dt(lt),
            ..self.scheme.clone()
        }
    }

    fn sorted_levels(v: &[u32]) -> Vec<u32> {
        let mut v = v.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.lx.is_empty() || self.lt.is_empty() {
            return Err(Error::InvalidArgument("empty level list".into()));
        }
        if !(self.h0 > 0.0) || !(self.dt0 > 0.0) {
            return Err(Error::InvalidArgument("h0 and dt0 must be positive".into()));
        }
        self.cell(0, 0).validate()
    }

    pub fn reference_spec(&self) -> ReferenceSpec {
        let lx = *self.lx.iter().max().unwrap_or(&0);
        let lt = *self.lt.iter().max().unwrap_or(&0);
        let dt = self.dt(lt) / 4.0;
        match self.reference {
            ReferenceMode::SelfConsistent => ReferenceSpec::Eulerian(SchemeConfig {
                h: self.h(lx),
                dt,
                scheme: Scheme::Bdf2,
                bc_mode: BcMode::Lagrange,
                c_delta: 4.0,
                ..self.scheme.clone()
            }),
            ReferenceMode::Ale => ReferenceSpec::Ale(AleConfig {
                dt,
                t_end: self.scheme.t_end,
                gravity: self.scheme.gravity,
                aitken_tol: self.scheme.aitken_tol,
                aitken_max_iters: self.scheme.aitken_max_iters,
                initial_center: self.scheme.initial_center,
                radius: self.scheme.radius,
                ..AleConfig::default()
            }),
        }
    }
}

/// Fully resolved description of a reference run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSpec {
    Eulerian(SchemeConfig),
    Ale(AleConfig),
}

impl ReferenceSpec {
    pub fn dt(&self) -> f64 {
        match self {
            Self::Eulerian(c) => c.dt,
            Self::Ale(c) => c.dt,
        }
    }

    pub fn with_dt(&self, dt: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            Self::Eulerian(c) => c.dt = dt,
            Self::Ale(c) => c.dt = dt,
        }
        out
    }

    pub fn run(&self) -> Result<Vec<TrajectoryRow>> {
        match self {
            Self::Eulerian(c) => run_trajectory(c),
            Self::Ale(c) => run_reference(c),
        }
    }
}

pub fn run_trajectory(cfg: &SchemeConfig) -> Result<Vec<TrajectoryRow>> {
    let mut sim = Simulation::new(cfg.clone())?;
    Ok(sim.run()?.iter().map(TrajectoryRow::from).collect())
}

/// Hex sha256 of the JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Runs `compute` unless a trajectory for `key` is already cached in `dir`.
pub fn cached_trajectory<T: Serialize>(
    dir: Option<&Path>,
    prefix: &str,
    key: &T,
    compute: impl FnOnce() -> Result<Vec<TrajectoryRow>>,
) -> Result<Vec<TrajectoryRow>> {
    let Some(dir) = dir else {
        return compute();
    };
    let path = dir.join(format!("{prefix}_{}.csv", config_hash(key)?));
    if let Ok(file) = File::open(&path) {
        if let Ok(rows) = read_trajectory(BufReader::new(file)) {
            return Ok(rows);
        }
    }
    let rows = compute()?;
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("tmp");
    write_trajectory(BufWriter::new(File::create(&tmp)?), &rows)?;
    fs::rename(&tmp, &path)?;
    Ok(rows)
}

fn interpolate(reference: &[TrajectoryRow], t: f64) -> ([f64; 2], [f64; 2]) {
    let i = reference.partition_point(|r| r.t < t);
    if i == 0 {
        return (reference[0].xi, reference[0].center);
    }
    if i == reference.len() {
        let r = &reference[i - 1];
        return (r.xi, r.center);
    }
    let (a, b) = (&reference[i - 1], &reference[i]);
    if b.t == t {
        return (b.xi, b.center);
    }
    let s = (t - a.t) / (b.t - a.t);
    let lerp = |p: [f64; 2], q: [f64; 2]| [p[0] + s * (q[0] - p[0]), p[1] + s * (q[1] - p[1])];
    (lerp(a.xi, b.xi), lerp(a.center, b.center))
}

fn check_horizon(traj: &[TrajectoryRow], reference: &[TrajectoryRow]) -> Result<()> {
    let (Some(a), Some(b)) = (traj.last(), reference.last()) else {
        return Err(Error::HorizonMismatch("empty trajectory".into()));
    };
    let tol = 1e-9 * a.t.abs().max(1.0);
    if (a.t - b.t).abs() > tol || reference[0].t > traj[0].t + tol {
        return Err(Error::HorizonMismatch(format!(
            "trajectory covers [{}, {}], reference [{}, {}]",
            traj[0].t, a.t, reference[0].t, b.t
        )));
    }
    Ok(())
}

/// Discrete space-time `l2` errors of velocity and position, with the reference
/// linearly interpolated to the trajectory's time levels.
pub fn spacetime_error(traj: &[TrajectoryRow], reference: &[TrajectoryRow]) -> Result<(f64, f64)> {
    check_horizon(traj, reference)?;
    let (mut ev, mut ec) = (0.0, 0.0);
    let mut t_prev = 0.0;
    for r in traj {
        let dt = r.t - t_prev;
        t_prev = r.t;
        if r.t <= 0.0 {
            continue;
        }
        let (xi, c) = interpolate(reference, r.t);
        ev += dt * ((xi[0] - r.xi[0]).powi(2) + (xi[1] - r.xi[1]).powi(2));
        ec += dt * ((c[0] - r.center[0]).powi(2) + (c[1] - r.center[1]).powi(2));
    }
    Ok((ev.sqrt(), ec.sqrt()))
}

/// `sqrt(sum dt |xi|^2)` over a trajectory.
pub fn velocity_norm(traj: &[TrajectoryRow]) -> f64 {
    let mut t_prev = 0.0;
    let mut acc = 0.0;
    for r in traj {
        acc += (r.t - t_prev) * (r.xi[0].powi(2) + r.xi[1].powi(2));
        t_prev = r.t;
    }
    acc.sqrt()
}

/// Relative change of the velocity norm between two reference runs, and the
/// relative norm of their difference.
pub fn richardson_change(fine: &[TrajectoryRow], coarse: &[TrajectoryRow]) -> Result<(f64, f64)> {
    let (nf, nc) = (velocity_norm(fine), velocity_norm(coarse));
    let (diff, _) = spacetime_error(coarse, fine)?;
    Ok(((nf - nc).abs() / nf, diff / nf))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub lx: u32,
    pub lt: u32,
    pub h: f64,
    pub dt: f64,
    pub err_velocity: f64,
    pub err_position: f64,
    pub observed_rate_t: Option<f64>,
    pub observed_rate_x: Option<f64>,
}

impl ErrorRow {
    fn ok(&self) -> bool {
        self.err_velocity.is_finite() && self.err_velocity > 0.0
    }
}

/// Fills in rates `log2(e_coarse / e_fine)` per level between adjacent levels:
/// temporal on the finest `Lx`, spatial on the finest `Lt` (or everywhere).
pub fn compute_rates(rows: &mut [ErrorRow], full_grid: bool) {
    let max_lx = rows.iter().map(|r| r.lx).max().unwrap_or(0);
    let max_lt = rows.iter().map(|r| r.lt).max().unwrap_or(0);
    let snapshot = rows.to_vec();
    let find = |lx: u32, lt: u32| snapshot.iter().find(|r| r.lx == lx && r.lt == lt);
    let rate = |c: &ErrorRow, f: &ErrorRow, levels: u32| {
        (c.ok() && f.ok()).then(|| (c.err_velocity / f.err_velocity).log2() / levels as f64)
    };
    for r in rows.iter_mut() {
        r.observed_rate_t = None;
        r.observed_rate_x = None;
        if full_grid || r.lx == max_lx {
            let coarser = snapshot.iter().filter(|o| o.lx == r.lx && o.lt < r.lt).map(|o| o.lt).max();
            if let Some(c) = coarser.and_then(|lt| find(r.lx, lt)) {
                r.observed_rate_t = rate(c, r, r.lt - c.lt);
            }
        }
        if full_grid || r.lt == max_lt {
            let coarser = snapshot.iter().filter(|o| o.lt == r.lt && o.lx < r.lx).map(|o| o.lx).max();
            if let Some(c) = coarser.and_then(|lx| find(lx, r.lt)) {
                r.observed_rate_x = rate(c, r, r.lx - c.lx);
            }
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_sig).unwrap_or_default()
}

pub fn write_errors<W: Write>(mut out: W, rows: &[ErrorRow]) -> Result<()> {
    writeln!(out, "{ERRORS_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.lx,
            r.lt,
            fmt_sig(r.h),
            fmt_sig(r.dt),
            fmt_sig(r.err_velocity),
            fmt_sig(r.err_position),
            opt(r.observed_rate_t),
            opt(r.observed_rate_x)
        )?;
    }
    Ok(())
}

pub fn read_errors<R: BufRead>(input: R) -> Result<Vec<ErrorRow>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty errors table".into()))??;
    if header.trim_end() != ERRORS_HEADER {
        return Err(Error::Parse(format!("unexpected errors header {header:?}")));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
    let rate = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
    let level = |s: &str| s.parse::<u32>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 8 {
            return Err(Error::Parse(format!("expected 8 fields, got {}: {line:?}", f.len())));
        }
        rows.push(ErrorRow {
            lx: level(f[0])?,
            lt: level(f[1])?,
            h: num(f[2])?,
            dt: num(f[3])?,
            err_velocity: num(f[4])?,
            err_position: num(f[5])?,
            observed_rate_t: rate(f[6])?,
            observed_rate_x: rate(f[7])?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    #[serde(rename = "Lx")]
    pub lx: u32,
    #[serde(rename = "Lt")]
    pub lt: u32,
    pub h: f64,
    pub dt: f64,
    pub failed: bool,
    pub message: Option<String>,
    pub steps: usize,
    pub mean_iterations: Option<f64>,
    pub max_iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: StudyConfig,
    pub reference: ReferenceSpec,
    pub cells: Vec<CellReport>,
}

#[derive(Clone, Debug)]
pub struct StudyOutput {
    pub rows: Vec<ErrorRow>,
    pub report: RunReport,
    pub reference: Vec<TrajectoryRow>,
    pub trajectories: Vec<((u32, u32), Vec<TrajectoryRow>)>,
}

/// Where `run_study` writes its files and caches trajectories.
#[derive(Clone, Debug, Default)]
pub struct StudyPaths {
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

/// Runs every `(Lx, Lt)` cell, measures its errors against the reference and
/// writes the trajectory, error, reference and run files. A failing cell is
/// recorded with NaN errors and does not stop the study.
pub fn run_study(config: &StudyConfig, paths: &StudyPaths) -> Result<StudyOutput> {
    config.validate()?;
    let spec = config.reference_spec();
    let cache = paths.cache.as_deref();
    let reference = cached_trajectory(cache, "reference", &spec, || spec.run())?;

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let mut trajectories = Vec::new();
    for &lx in &StudyConfig::sorted_levels(&config.lx) {
        for &lt in &StudyConfig::sorted_levels(&config.lt) {
            let cfg = config.cell(lx, lt);
            let result = cached_trajectory(cache, "cell", &cfg, || run_trajectory(&cfg))
                .and_then(|traj| spacetime_error(&traj, &reference).map(|e| (traj, e)));
            let mut report = CellReport {
                lx,
                lt,
                h: cfg.h,
                dt: cfg.dt,
                failed: false,
                message: None,
                steps: 0,
                mean_iterations: None,
                max_iterations: None,
            };
            let (ev, ec) = match result {
                Ok((traj, e)) => {
                    let its: Vec<usize> = traj.iter().skip(1).map(|r| r.iterations).collect();
                    report.steps = its.len();
                    if !its.is_empty() {
                        report.mean_iterations = Some(its.iter().sum::<usize>() as f64 / its.len() as f64);
                        report.max_iterations = its.iter().copied().max();
                    }
                    trajectories.push(((lx, lt), traj));
                    e
                }
                Err(e) => {
                    log::warn!("cell Lx={lx} Lt={lt} failed: {e}");
                    report.failed = true;
                    report.message = Some(e.to_string());
                    (f64::NAN, f64::NAN)
                }
            };
            cells.push(report);
            rows.push(ErrorRow {
                lx,
                lt,
                h: cfg.h,
                dt: cfg.dt,
                err_velocity: ev,
                err_position: ec,
                observed_rate_t: None,
                observed_rate_x: None,
            });
        }
    }
    compute_rates(&mut rows, config.full_grid_rates);
    let out = StudyOutput {
        rows,
        report: RunReport {
            config: config.clone(),
            reference: spec,
            cells,
        },
        reference,
        trajectories,
    };
    if let Some(dir) = &paths.out {
        write_outputs(dir, &out)?;
    }
    Ok(out)
}

pub fn write_outputs(dir: &Path, out: &StudyOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ((lx, lt), traj) in &out.trajectories {
        let f = File::create(dir.join(format!("trajectory_Lx{lx}_Lt{lt}.csv")))?;
        write_trajectory(BufWriter::new(f), traj)?;
    }
    write_trajectory(BufWriter::new(File::create(dir.join("reference.csv"))?), &out.reference)?;
    write_errors(BufWriter::new(File::create(dir.join("errors.csv"))?), &out.rows)?;
    let mut json = serde_json::to_string_pretty(&out.report)?;
    json.push('\n');
    fs::write(dir.join("run.json"), json)?;
    Ok(())
}
