//! Time stepping of the coupled heat equation and rigid-body ODE: strip sizing,
//! block system assembly, partitioned coupling with Aitken relaxation, and the
//! per-step energy identity.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forms::{
    assemble_coupling_b, assemble_ghost_penalty, assemble_mass, assemble_multiplier_stab, assemble_nitsche,
    assemble_stiffness, interface_integral, nitsche_force, velocity_pattern, CutGeometry, ReferenceData,
    StabilizationParams,
};
use crate::geometry::{classify, strip_crossing_bound, ActiveDecomposition, RigidState};
use crate::mesh::{build_structured_mesh, TriMesh};
use crate::solver::{factor_cached, SymbolicCache};
use crate::sparse::SparseMatrix;
use crate::spaces::{multiplier_space, transfer, velocity_space, DofLayout, DofMap, FeFunction};

/// Smallest non-zero strip width.
pub const MIN_STRIP_WIDTH: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bdf1,
    Bdf2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BcMode {
    Lagrange,
    Nitsche,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Bdf1 => "bdf1",
            Scheme::Bdf2 => "bdf2",
        })
    }
}

impl fmt::Display for BcMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BcMode::Lagrange => "lagrange",
            BcMode::Nitsche => "nitsche",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bdf1" => Ok(Scheme::Bdf1),
            "bdf2" => Ok(Scheme::Bdf2),
            _ => Err(Error::Parse(format!("unknown scheme '{s}'"))),
        }
    }
}

impl FromStr for BcMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lagrange" => Ok(BcMode::Lagrange),
            "nitsche" => Ok(BcMode::Nitsche),
            _ => Err(Error::Parse(format!("unknown boundary condition mode '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    /// Velocity polynomial degree; multipliers use `k - 1`.
    pub k: usize,
    /// Background mesh size target.
    pub h: f64,
    pub dt: f64,
    pub t_end: f64,
    pub scheme: Scheme,
    pub bc_mode: BcMode,
    pub gravity: [f64; 2],
    pub c_delta: f64,
    pub gamma_s: f64,
    pub gamma_lambda: f64,
    pub nitsche_penalty: f64,
    pub aitken_tol: f64,
    pub aitken_max_iters: usize,
    pub initial_center: [f64; 2],
    pub radius: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            k: 2,
            h: 0.1,
            dt: 0.02,
            t_end: 1.0,
            scheme: Scheme::Bdf1,
            bc_mode: BcMode::Lagrange,
            gravity: [0.0, -1.0],
            c_delta: 2.0,
            gamma_s: 0.1,
            gamma_lambda: 0.01,
            nitsche_penalty: 40.0,
            aitken_tol: 1e-8,
            aitken_max_iters: 25,
            initial_center: [0.5, 0.8],
            radius: 0.1,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return bad(format!("t_end = {} must be positive", self.t_end));
        }
        if !(self.c_delta > 1.0) {
            return bad(format!("c_delta = {} must exceed 1", self.c_delta));
        }
        if self.k == 0 || self.k > 7 {
            return bad(format!("degree k = {} outside 1..=7", self.k));
        }
        if self.bc_mode == BcMode::Lagrange && self.k < 2 {
            return bad("the multiplier formulation needs k >= 2".into());
        }
        if !(self.aitken_tol > 0.0) || self.aitken_max_iters == 0 {
            return bad("coupling tolerance and iteration limit must be positive".into());
        }
        if !(self.radius > 0.0) {
            return bad(format!("radius = {} must be positive", self.radius));
        }
        self.stabilization(1).validate()
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt).round().max(1.0) as usize
    }

    pub fn gravity(&self) -> Vector2<f64> {
        Vector2::new(self.gravity[0], self.gravity[1])
    }

    pub fn initial_state(&self) -> RigidState {
        RigidState::new(
            Point2::new(self.initial_center[0], self.initial_center[1]),
            self.radius,
            Vector2::zeros(),
        )
    }

    pub fn stabilization(&self, k_strip: usize) -> StabilizationParams {
        StabilizationParams {
            gamma_s: self.gamma_s,
            gamma_lambda: self.gamma_lambda,
            nitsche_penalty: self.nitsche_penalty,
            k_strip,
        }
    }
}

/// Summary of one accepted time step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub state: RigidState,
    pub force: Vector2<f64>,
    pub iterations: usize,
    /// Energy identity defect relative to its largest term (BDF1 with multipliers only).
    pub energy_residual: Option<f64>,
    pub n_active: usize,
    pub k_strip: usize,
    pub delta_h: f64,
    pub n_dofs: usize,
}

impl StepRecord {
    fn initial(state: RigidState, n_active: usize) -> Self {
        Self {
            step: 0,
            t: 0.0,
            state,
            force: Vector2::zeros(),
            iterations: 0,
            energy_residual: Some(0.0),
            n_active,
            k_strip: 1,
            delta_h: 0.0,
            n_dofs: 0,
        }
    }
}

/// `delta_h = c |xi| dt`, zero only for a body at rest.
pub fn strip_width(c_delta: f64, dt: f64, xi: Vector2<f64>) -> f64 {
    let w = xi.norm();
    if w == 0.0 {
        0.0
    } else {
        (c_delta * w * dt).max(MIN_STRIP_WIDTH)
    }
}

pub fn gamma_gp(gamma_s: f64, k_strip: usize) -> f64 {
    gamma_s * k_strip as f64
}

fn use_bdf2(cfg: &SchemeConfig, history: &[RigidState]) -> bool {
    cfg.scheme == Scheme::Bdf2 && history.len() >= 2
}

/// Position update for an accepted velocity; `history` ends with step `n - 1`.
pub fn advance_geometry(cfg: &SchemeConfig, history: &[RigidState], xi_new: Vector2<f64>) -> Result<RigidState> {
    let last = history
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty state history".into()))?;
    let center = if use_bdf2(cfg, history) {
        let c2 = history[history.len() - 2].center;
        last.center + (last.center - c2 + 2.0 * cfg.dt * xi_new) / 3.0
    } else {
        last.center + cfg.dt * xi_new
    };
    let next = RigidState::new(center, last.radius, xi_new);
    let clearance = next.clearance();
    if !(clearance > 0.0) {
        return Err(Error::BodyLeftDomain { clearance });
    }
    Ok(next)
}

/// Velocity update of the rigid body for a given interface force.
pub fn ode_update(cfg: &SchemeConfig, force: Vector2<f64>, history: &[RigidState]) -> Vector2<f64> {
    let last = history.last().expect("non-empty state history").xi;
    let rhs = cfg.gravity() + force;
    if use_bdf2(cfg, history) {
        let xi2 = history[history.len() - 2].xi;
        last + (last - xi2 + 2.0 * cfg.dt * rhs) / 3.0
    } else {
        last + cfg.dt * rhs
    }
}

/// Aitken relaxation factor from two consecutive residuals.
pub fn aitken_update(r_prev: Vector2<f64>, r_curr: Vector2<f64>, omega_prev: f64) -> f64 {
    let dr = r_curr - r_prev;
    let d2 = dr.norm_squared();
    if d2.sqrt() < 1e-30 {
        return omega_prev;
    }
    (-omega_prev * r_prev.dot(&dr) / d2).clamp(0.05, 2.0)
}

/// Everything assembled on one provisional geometry.
pub struct StepOperators {
    pub state: RigidState,
    pub decomp: Arc<ActiveDecomposition>,
    pub geo: CutGeometry,
    pub vel: Arc<DofMap>,
    pub mult: Option<Arc<DofMap>>,
    pub k_strip: usize,
    pub gamma_gp: f64,
    pub mass: SparseMatrix,
    pub stiffness: SparseMatrix,
    pub ghost: SparseMatrix,
    /// Multiplier coupling `B`, stabilisation `J` and `int_Gamma mu`.
    pub coupling: Option<(SparseMatrix, SparseMatrix, Vec<f64>)>,
    /// Nitsche matrix and the right-hand side per unit boundary datum.
    pub nitsche: Option<(SparseMatrix, Vec<f64>)>,
}

impl StepOperators {
    pub fn build(
        cfg: &SchemeConfig,
        mesh: &TriMesh,
        layouts: &Layouts,
        refd: &ReferenceData,
        state: RigidState,
        delta_h: f64,
    ) -> Result<Self> {
        let decomp = Arc::new(classify(mesh, &state, delta_h)?);
        let k_strip = strip_crossing_bound(&decomp, mesh)?;
        let vel = Arc::new(velocity_space(&layouts.velocity, mesh, &decomp)?);
        let geo = CutGeometry::new(mesh, &decomp, 2 * cfg.k)?;
        let pattern = velocity_pattern(mesh, &vel, &decomp);
        let mass = assemble_mass(mesh, &vel, &geo, refd, &pattern)?;
        let stiffness = assemble_stiffness(mesh, &vel, &geo, refd, &pattern)?;
        let ghost = assemble_ghost_penalty(mesh, &vel, &decomp, geo.h, refd, &pattern)?;
        let params = cfg.stabilization(k_strip);
        let (mult, coupling, nitsche) = match cfg.bc_mode {
            BcMode::Lagrange => {
                let layout = layouts
                    .multiplier
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("missing multiplier layout".into()))?;
                let mult = Arc::new(multiplier_space(layout, mesh, &decomp)?);
                let b = assemble_coupling_b(mesh, &vel, &mult, &geo)?;
                let j = assemble_multiplier_stab(mesh, &mult, &geo)?;
                let ell = b.matvec(&vec![1.0; vel.n_active_dofs()]);
                (Some(mult), Some((b, j, ell)), None)
            }
            BcMode::Nitsche => {
                let n = assemble_nitsche(mesh, &vel, &geo, &params, &pattern)?;
                (None, None, Some(n))
            }
        };
        Ok(Self {
            state,
            decomp,
            geo,
            vel,
            mult,
            k_strip,
            gamma_gp: params.gamma_gp(),
            mass,
            stiffness,
            ghost,
            coupling,
            nitsche,
        })
    }

    pub fn n_velocity(&self) -> usize {
        self.vel.n_active_dofs()
    }

    pub fn n_multiplier(&self) -> usize {
        self.mult.as_ref().map_or(0, |m| m.n_active_dofs())
    }
}

/// Velocity and multiplier layouts on the background mesh.
pub struct Layouts {
    pub velocity: Arc<DofLayout>,
    pub multiplier: Option<Arc<DofLayout>>,
}

impl Layouts {
    pub fn new(mesh: &TriMesh, cfg: &SchemeConfig) -> Result<Self> {
        let velocity = Arc::new(DofLayout::new(mesh, cfg.k)?);
        let multiplier = match cfg.bc_mode {
            BcMode::Lagrange => Some(Arc::new(DofLayout::new(mesh, cfg.k - 1)?)),
            BcMode::Nitsche => None,
        };
        Ok(Self { velocity, multiplier })
    }
}

fn weighted_history(u_prev: &[[f64; 2]], u_prev2: Option<&[[f64; 2]]>, dt: f64) -> (f64, Vec<[f64; 2]>) {
    match u_prev2 {
        None => (1.0 / dt, u_prev.iter().map(|v| [v[0] / dt, v[1] / dt]).collect()),
        Some(u2) => (
            1.5 / dt,
            u_prev
                .iter()
                .zip(u2)
                .map(|(a, b)| [(4.0 * a[0] - b[0]) / (2.0 * dt), (4.0 * a[1] - b[1]) / (2.0 * dt)])
                .collect(),
        ),
    }
}

/// Block matrix and the two component right-hand sides of one step. `u_prev2` selects
/// the BDF2 difference quotient. Homogeneous Dirichlet DOFs become identity rows.
pub fn assemble_step_system(
    cfg: &SchemeConfig,
    ops: &StepOperators,
    u_prev: &[[f64; 2]],
    u_prev2: Option<&[[f64; 2]]>,
    xi_guess: Vector2<f64>,
) -> Result<(SparseMatrix, [Vec<f64>; 2])> {
    let n = ops.n_velocity();
    if u_prev.len() != n || u_prev2.is_some_and(|u| u.len() != n) {
        return Err(Error::InvalidArgument("history does not match the velocity space".into()));
    }
    let (a0, hist) = weighted_history(u_prev, u_prev2, cfg.dt);
    let a = assemble_block_matrix(cfg, ops, a0);
    let dir = &ops.vel.dirichlet;
    let mhist = ops.mass.matvec2(&hist);
    let mut rhs: [Vec<f64>; 2] = [mhist.iter().map(|v| v[0]).collect(), mhist.iter().map(|v| v[1]).collect()];
    if let Some((_, r)) = &ops.nitsche {
        for c in 0..2 {
            for (out, ri) in rhs[c].iter_mut().zip(r) {
                *out += ri * xi_guess[c];
            }
        }
    }
    for c in 0..2 {
        for (out, &d) in rhs[c].iter_mut().zip(dir) {
            if d {
                *out = 0.0;
            }
        }
    }
    if let Some((_, _, ell)) = &ops.coupling {
        for c in 0..2 {
            rhs[c].extend(ell.iter().map(|l| l * xi_guess[c]));
        }
    }
    Ok((a, rhs))
}

/// `[a0 M + A + gamma_gp G, B^T; B, -gamma_lambda J]` (or the Nitsche velocity
/// block), with identity rows and zero columns for the Dirichlet DOFs.
/// `a0 = 0` gives the stationary system.
pub fn assemble_block_matrix(cfg: &SchemeConfig, ops: &StepOperators, a0: f64) -> SparseMatrix {
    let n = ops.n_velocity();
    let mut k = ops.mass.combine(a0, &ops.stiffness, 1.0).combine(1.0, &ops.ghost, ops.gamma_gp);
    if let Some((nm, _)) = &ops.nitsche {
        k = k.combine(1.0, nm, 1.0);
    }
    k.symmetrize();
    let dir = &ops.vel.dirichlet;
    for r in 0..n {
        for p in k.indptr[r]..k.indptr[r + 1] {
            let c = k.indices[p];
            if dir[r] || dir[c] {
                k.values[p] = if r == c { 1.0 } else { 0.0 };
            }
        }
    }
    let Some((b, j, _)) = &ops.coupling else {
        return k;
    };
    let m = b.nrows;
    let mut b = b.clone();
    for (v, &c) in b.values.iter_mut().zip(&b.indices) {
        if dir[c] {
            *v = 0.0;
        }
    }
    let bt = b.transpose();
    let mut jm = j.clone();
    jm.scale(-cfg.gamma_lambda);
    jm.symmetrize();

    let total = n + m;
    let mut indptr = Vec::with_capacity(total + 1);
    let mut indices = Vec::with_capacity(k.nnz() + 2 * b.nnz() + jm.nnz());
    let mut values = Vec::with_capacity(indices.capacity());
    indptr.push(0);
    for r in 0..n {
        for (c, v) in k.row(r) {
            indices.push(c);
            values.push(v);
        }
        for (c, v) in bt.row(r) {
            indices.push(n + c);
            values.push(v);
        }
        indptr.push(indices.len());
    }
    for r in 0..m {
        for (c, v) in b.row(r) {
            indices.push(c);
            values.push(v);
        }
        for (c, v) in jm.row(r) {
            indices.push(n + c);
            values.push(v);
        }
        indptr.push(indices.len());
    }
    SparseMatrix {
        nrows: total,
        ncols: total,
        indptr,
        indices,
        values,
    }
}

/// `F = int_{Gamma_h} lambda`.
pub fn compute_force(mesh: &TriMesh, lambda: &FeFunction, geo: &CutGeometry) -> Result<Vector2<f64>> {
    let f = interface_integral(mesh, lambda, geo)?;
    Ok(Vector2::new(f[0], f[1]))
}

/// Terms of the BDF1 energy identity obtained by testing the step with
/// `2 dt (u, -lambda, xi)`; they sum to zero for an exact solve.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyTerms {
    pub u_new: f64,
    pub u_jump: f64,
    pub u_old: f64,
    pub xi_new: f64,
    pub xi_jump: f64,
    pub xi_old: f64,
    pub dissipation: f64,
    pub ghost: f64,
    pub multiplier_stab: f64,
    pub gravity_work: f64,
    /// `2 dt F . (xi_guess - xi_n)`, zero when the coupling is solved exactly.
    pub coupling_defect: f64,
}

impl EnergyTerms {
    fn all(&self) -> [f64; 11] {
        [
            self.u_new,
            self.u_jump,
            -self.u_old,
            self.xi_new,
            self.xi_jump,
            -self.xi_old,
            self.dissipation,
            self.ghost,
            self.multiplier_stab,
            -self.gravity_work,
            self.coupling_defect,
        ]
    }

    pub fn largest(&self) -> f64 {
        self.all().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Absolute defect of the identity.
    pub fn defect(&self) -> f64 {
        self.all().iter().sum::<f64>().abs()
    }

    /// Defect relative to the largest term; zero for a zero solution.
    pub fn relative_defect(&self) -> f64 {
        let l = self.largest();
        if l == 0.0 {
            0.0
        } else {
            self.defect() / l
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn energy_terms(
    cfg: &SchemeConfig,
    ops: &StepOperators,
    u: &[[f64; 2]],
    u_prev: &[[f64; 2]],
    lambda: &[[f64; 2]],
    xi: Vector2<f64>,
    xi_prev: Vector2<f64>,
    xi_guess: Vector2<f64>,
    force: Vector2<f64>,
) -> EnergyTerms {
    let dt = cfg.dt;
    let jump: Vec<[f64; 2]> = u.iter().zip(u_prev).map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect();
    let j = ops
        .coupling
        .as_ref()
        .map_or(0.0, |(_, j, _)| j.bilinear2(lambda, lambda));
    EnergyTerms {
        u_new: ops.mass.bilinear2(u, u),
        u_jump: ops.mass.bilinear2(&jump, &jump),
        u_old: ops.mass.bilinear2(u_prev, u_prev),
        xi_new: xi.norm_squared(),
        xi_jump: (xi - xi_prev).norm_squared(),
        xi_old: xi_prev.norm_squared(),
        dissipation: 2.0 * dt * ops.stiffness.bilinear2(u, u),
        ghost: 2.0 * dt * ops.gamma_gp * ops.ghost.bilinear2(u, u),
        multiplier_stab: 2.0 * dt * cfg.gamma_lambda * j,
        gravity_work: 2.0 * dt * cfg.gravity().dot(&xi),
        coupling_defect: 2.0 * dt * force.dot(&(xi_guess - xi)),
    }
}

/// Fluid solution on one provisional geometry.
pub struct FluidSolution {
    pub ops: StepOperators,
    pub u: FeFunction,
    pub lambda: Option<FeFunction>,
    pub force: Vector2<f64>,
    /// Transferred previous velocity on the new active DOFs.
    pub u_prev: Vec<[f64; 2]>,
}

struct Level {
    state: RigidState,
    u: FeFunction,
}

/// A running simulation: background mesh, history and accepted step records.
pub struct Simulation {
    pub config: SchemeConfig,
    pub mesh: Arc<TriMesh>,
    layouts: Layouts,
    refd: ReferenceData,
    history: Vec<Level>,
    pub records: Vec<StepRecord>,
    cache: SymbolicCache,
    last_lambda: Option<FeFunction>,
}

impl Simulation {
    pub fn new(config: SchemeConfig) -> Result<Self> {
        config.validate()?;
        let mesh = Arc::new(build_structured_mesh(config.h)?);
        Self::with_mesh(config, mesh)
    }

    /// Starts from `u = 0` on the whole background mesh.
    pub fn with_mesh(config: SchemeConfig, mesh: Arc<TriMesh>) -> Result<Self> {
        config.validate()?;
        let layouts = Layouts::new(&mesh, &config)?;
        let refd = ReferenceData::new(config.k, 2 * config.k);
        let all: Vec<usize> = (0..mesh.n_triangles()).collect();
        let map = Arc::new(DofMap::new(layouts.velocity.clone(), &all, mesh.n_triangles(), true)?);
        let state = config.initial_state();
        if !(state.clearance() > 0.0) {
            return Err(Error::BodyLeftDomain {
                clearance: state.clearance(),
            });
        }
        let records = vec![StepRecord::initial(state, all.len())];
        Ok(Self {
            config,
            mesh,
            layouts,
            refd,
            history: vec![Level {
                state,
                u: FeFunction::zeros(map),
            }],
            records,
            cache: SymbolicCache::new(),
            last_lambda: None,
        })
    }

    pub fn state(&self) -> RigidState {
        self.history.last().unwrap().state
    }

    pub fn time(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.t)
    }

    pub fn velocity(&self) -> &FeFunction {
        &self.history.last().unwrap().u
    }

    pub fn multiplier(&self) -> Option<&FeFunction> {
        self.last_lambda.as_ref()
    }

    pub fn layouts(&self) -> &Layouts {
        &self.layouts
    }

    pub fn reference_data(&self) -> &ReferenceData {
        &self.refd
    }

    fn states(&self) -> Vec<RigidState> {
        self.history.iter().map(|l| l.state).collect()
    }

    /// Provisional geometry for a velocity guess.
    pub fn trial_state(&self, xi: Vector2<f64>) -> Result<RigidState> {
        advance_geometry(&self.config, &self.states(), xi)
    }

    /// Strip width of the next step.
    pub fn next_strip_width(&self) -> f64 {
        strip_width(self.config.c_delta, self.config.dt, self.state().xi)
    }

    fn check_inclusion(&self, decomp: &ActiveDecomposition, bdf2: bool) -> Result<()> {
        let n = self.history.len();
        let levels = if bdf2 { &self.history[n - 2..] } else { &self.history[n - 1..] };
        for level in levels {
            let missing = decomp
                .cut_elements
                .iter()
                .filter(|&&t| level.u.map.slot_of(t).is_none())
                .count();
            if missing > 0 {
                return Err(Error::DomainInclusion { missing });
            }
        }
        Ok(())
    }

    /// Assembles and solves the fluid problem on the geometry of `state`
    /// with boundary datum `state.xi`.
    pub fn solve_fluid(&mut self, state: RigidState, delta_h: f64) -> Result<FluidSolution> {
        let cfg = &self.config;
        let bdf2 = use_bdf2(cfg, &self.states());
        let ops = StepOperators::build(cfg, &self.mesh, &self.layouts, &self.refd, state, delta_h)?;
        self.check_inclusion(&ops.decomp, bdf2)?;
        let n = self.history.len();
        let u_prev = transfer(&self.history[n - 1].u, &ops.vel, &ops.decomp)?;
        let u_prev2 = if bdf2 {
            Some(transfer(&self.history[n - 2].u, &ops.vel, &ops.decomp)?)
        } else {
            None
        };
        let (a, rhs) = assemble_step_system(cfg, &ops, &u_prev, u_prev2.as_deref(), state.xi)?;
        let fs = factor_cached(&a, &mut self.cache)?;
        let sol = fs.solve_many(&rhs)?;
        let nu = ops.n_velocity();
        let u = FeFunction {
            map: ops.vel.clone(),
            coeffs: (0..nu).map(|i| [sol[0][i], sol[1][i]]).collect(),
        };
        let (lambda, force) = match &ops.mult {
            Some(mult) => {
                let lam = FeFunction {
                    map: mult.clone(),
                    coeffs: (0..ops.n_multiplier()).map(|i| [sol[0][nu + i], sol[1][nu + i]]).collect(),
                };
                let f = compute_force(&self.mesh, &lam, &ops.geo)?;
                (Some(lam), f)
            }
            None => {
                let params = cfg.stabilization(ops.k_strip);
                let f = nitsche_force(&self.mesh, &u, &ops.geo, &params, state.xi)?;
                (None, Vector2::new(f[0], f[1]))
            }
        };
        Ok(FluidSolution {
            ops,
            u,
            lambda,
            force,
            u_prev,
        })
    }

    /// Advances one time step with the relaxed fixed-point coupling.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let cfg = self.config.clone();
        let states = self.states();
        let prev = *states.last().unwrap();
        let delta_h = strip_width(cfg.c_delta, cfg.dt, prev.xi);
        let bdf2 = use_bdf2(&cfg, &states);

        let mut guess = prev.xi;
        let mut omega = 1.0;
        let mut r_prev: Option<Vector2<f64>> = None;
        let mut last_update = f64::INFINITY;
        for it in 1..=cfg.aitken_max_iters {
            let trial = advance_geometry(&cfg, &states, guess)?;
            let sol = self.solve_fluid(trial, delta_h)?;
            let xi_new = ode_update(&cfg, sol.force, &states);
            let r = xi_new - guess;
            if let Some(rp) = r_prev {
                omega = aitken_update(rp, r, omega);
            }
            let relaxed = guess + omega * r;
            last_update = (relaxed - guess).norm();
            if last_update <= cfg.aitken_tol * relaxed.norm().max(1e-12) {
                return self.accept(sol, xi_new, guess, prev, it, delta_h, bdf2);
            }
            r_prev = Some(r);
            guess = relaxed;
        }
        Err(Error::CouplingDiverged {
            iterations: cfg.aitken_max_iters,
            update: last_update,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn accept(
        &mut self,
        sol: FluidSolution,
        xi_new: Vector2<f64>,
        xi_guess: Vector2<f64>,
        prev: RigidState,
        iterations: usize,
        delta_h: f64,
        bdf2: bool,
    ) -> Result<&StepRecord> {
        let cfg = &self.config;
        let state = advance_geometry(cfg, &self.states(), xi_new)?;
        let energy_residual = match (&sol.lambda, bdf2 || cfg.scheme == Scheme::Bdf2) {
            (Some(lam), false) => Some(
                energy_terms(
                    cfg,
                    &sol.ops,
                    &sol.u.coeffs,
                    &sol.u_prev,
                    &lam.coeffs,
                    xi_new,
                    prev.xi,
                    xi_guess,
                    sol.force,
                )
                .relative_defect(),
            ),
            _ => None,
        };
        let step = self.records.len();
        let record = StepRecord {
            step,
            t: step as f64 * cfg.dt,
            state,
            force: sol.force,
            iterations,
            energy_residual,
            n_active: sol.ops.decomp.active_elements.len(),
            k_strip: sol.ops.k_strip,
            delta_h,
            n_dofs: 2 * (sol.ops.n_velocity() + sol.ops.n_multiplier()),
        };
        log::debug!(
            "step {step} t={:.4} C=({:.6},{:.6}) xi=({:.3e},{:.3e}) iters={iterations}",
            record.t,
            state.center.x,
            state.center.y,
            state.xi.x,
            state.xi.y
        );
        self.history.push(Level { state, u: sol.u });
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        self.last_lambda = sol.lambda;
        self.records.push(record);
        Ok(self.records.last().unwrap())
    }

    /// Runs to `t_end` and returns all records including the initial one.
    pub fn run(&mut self) -> Result<&[StepRecord]> {
        let n = self.config.n_steps();
        while self.records.len() <= n {
            self.step()?;
        }
        Ok(&self.records)
    }
}

/// One row of a trajectory table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub t: f64,
    pub center: [f64; 2],
    pub xi: [f64; 2],
    pub force: [f64; 2],
    pub iterations: usize,
    pub energy_residual: f64,
    pub n_active: usize,
    pub k_strip: usize,
}

impl From<&StepRecord> for TrajectoryRow {
    fn from(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            t: r.t,
            center: [r.state.center.x, r.state.center.y],
            xi: [r.state.xi.x, r.state.xi.y],
            force: [r.force.x, r.force.y],
            iterations: r.iterations,
            energy_residual: r.energy_residual.unwrap_or(f64::NAN),
            n_active: r.n_active,
            k_strip: r.k_strip,
        }
    }
}

pub const TRAJECTORY_HEADER: &str = "step,t,Cx,Cy,xix,xiy,Fx,Fy,iters,energy_residual,n_active,K";

/// 17 significant digits.
pub fn fmt_sig(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_trajectory<W: Write>(mut out: W, rows: &[TrajectoryRow]) -> Result<()> {
    writeln!(out, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            fmt_sig(r.t),
            fmt_sig(r.center[0]),
            fmt_sig(r.center[1]),
            fmt_sig(r.xi[0]),
            fmt_sig(r.xi[1]),
            fmt_sig(r.force[0]),
            fmt_sig(r.force[1]),
            r.iterations,
            fmt_sig(r.energy_residual),
            r.n_active,
            r.k_strip
        )?;
    }
    Ok(())
}

pub fn read_trajectory<R: BufRead>(input: R) -> Result<Vec<TrajectoryRow>> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory".into()))??;
    if header.trim() != TRAJECTORY_HEADER {
        return Err(Error::Parse(format!("unexpected trajectory header '{header}'")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::Parse(format!("line {}: expected 12 fields, got {}", i + 2, f.len())));
        }
        let fl = |j: usize| -> Result<f64> {
            f[j].trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {}: field {j}: {e}", i + 2)))
        };
        let int = |j: usize| -> Result<usize> {
            f[j].trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("line {}: field {j}: {e}", i + 2)))
        };
        rows.push(TrajectoryRow {
            step: int(0)?,
            t: fl(1)?,
            center: [fl(2)?, fl(3)?],
            xi: [fl(4)?, fl(5)?],
            force: [fl(6)?, fl(7)?],
            iterations: int(8)?,
            energy_residual: fl(9)?,
            n_active: int(10)?,
            k_strip: int(11)?,
        });
    }
    Ok(rows)
}
