//! Fitted-mesh arbitrary Lagrangian-Eulerian solver for the same coupled problem.
//!
//! The reference mesh is an O-grid between the circle and the unit square. The
//! deformation `x = x_ref + d(t) chi(x_ref)` translates the circle rigidly and
//! vanishes on the outer boundary; `chi` is piecewise linear, so deformed
//! elements stay straight.

use std::f64::consts::PI;
use std::sync::Mutex;

use nalgebra::{Point2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fe::TriGeom;
use crate::forms::ReferenceData;
use crate::geometry::RigidState;
use crate::mesh::{signed_area, TriMesh};
use crate::solver::{factor, factor_cached, FactoredSystem, SymbolicCache};
use crate::sparse::{Pattern, SparseMatrix};
use crate::spaces::DofLayout;
use crate::stepper::{advance_geometry, aitken_update, ode_update, Scheme, SchemeConfig, StepRecord, TrajectoryRow};

/// Smallest admissible ratio of deformed to reference element area.
pub const MIN_JACOBIAN: f64 = 0.1;

const DEFECT_TOLERANCE: f64 = 1e-13;
const DEFECT_MAX_ITERS: usize = 60;
const DEFECT_CONTRACTION: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct FittedMesh {
    pub mesh: TriMesh,
    pub center: Point2<f64>,
    pub radius: f64,
    pub n_circle: usize,
    pub n_radial: usize,
    /// Blending weight per vertex, 1 on the circle and 0 on the square.
    pub blend: Vec<f64>,
    pub circle_facets: Vec<usize>,
}

impl FittedMesh {
    pub fn area(&self) -> f64 {
        (0..self.mesh.n_triangles()).map(|t| self.mesh.area(t)).sum()
    }

    pub fn circle_perimeter(&self) -> f64 {
        self.circle_facets
            .iter()
            .map(|&f| {
                let [a, b] = self.mesh.facets[f].vertices;
                (self.mesh.vertices[a] - self.mesh.vertices[b]).norm()
            })
            .sum()
    }

    /// Vertex positions for a rigid displacement `d` of the circle.
    pub fn deformed_vertices(&self, d: Vector2<f64>) -> Vec<Point2<f64>> {
        self.mesh
            .vertices
            .iter()
            .zip(&self.blend)
            .map(|(x, chi)| x + d * *chi)
            .collect()
    }

    /// Smallest ratio of deformed to reference element area.
    pub fn min_jacobian(&self, d: Vector2<f64>) -> f64 {
        let x = self.deformed_vertices(d);
        self.mesh
            .triangles
            .iter()
            .map(|&[a, b, c]| {
                signed_area(&x[a], &x[b], &x[c])
                    / signed_area(&self.mesh.vertices[a], &self.mesh.vertices[b], &self.mesh.vertices[c])
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// `1 - (6 s^5 - 15 s^4 + 10 s^3)`: C^2 transition from 1 at `s = 0` to 0 at `s = 1`.
pub fn blend_profile(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    1.0 - s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

fn ray_box_exit(origin: &Point2<f64>, dir: &Vector2<f64>) -> Point2<f64> {
    let mut t = f64::INFINITY;
    for k in 0..2 {
        if dir[k] > 0.0 {
            t = t.min((1.0 - origin[k]) / dir[k]);
        } else if dir[k] < 0.0 {
            t = t.min(-origin[k] / dir[k]);
        }
    }
    origin + dir * t
}

/// O-grid of the unit square minus the disk: `n_circle` rays from the circle to
/// the square, `n_radial` element layers along each ray. The ray closest to each
/// corner of the square ends in that corner.
pub fn build_fitted_mesh(n_circle: usize, n_radial: usize, state: &RigidState) -> Result<FittedMesh> {
    if n_circle < 16 || n_radial < 1 {
        return Err(Error::InvalidArgument(format!(
            "fitted mesh needs n_circle >= 16 and n_radial >= 1 (got {n_circle}, {n_radial})"
        )));
    }
    if !(state.clearance() > 0.0) {
        return Err(Error::BodyLeftDomain {
            clearance: state.clearance(),
        });
    }
    let (c, r, n) = (state.center, state.radius, n_circle);
    let angle = |j: usize| 2.0 * PI * j as f64 / n as f64;
    let inner: Vec<Point2<f64>> = (0..n)
        .map(|j| c + r * Vector2::new(angle(j).cos(), angle(j).sin()))
        .collect();
    let mut outer: Vec<Point2<f64>> = (0..n)
        .map(|j| ray_box_exit(&c, &Vector2::new(angle(j).cos(), angle(j).sin())))
        .collect();
    let mut snapped = Vec::new();
    for corner in [Point2::new(1.0, 1.0), Point2::new(0.0, 1.0), Point2::new(0.0, 0.0), Point2::new(1.0, 0.0)] {
        let theta = (corner.y - c.y).atan2(corner.x - c.x).rem_euclid(2.0 * PI);
        let j = ((theta / (2.0 * PI) * n as f64).round() as usize) % n;
        if snapped.contains(&j) {
            return Err(Error::GeometryUnderResolved(format!("two corners snap to ray {j}")));
        }
        snapped.push(j);
        outer[j] = corner;
    }

    let rings = n_radial + 1;
    let mut vertices = Vec::with_capacity(rings * n);
    let mut blend = Vec::with_capacity(rings * n);
    for i in 0..rings {
        let s = i as f64 / n_radial as f64;
        for j in 0..n {
            vertices.push(inner[j] + (outer[j] - inner[j]) * s);
            blend.push(blend_profile(s));
        }
    }
    let id = |i: usize, j: usize| i * n + j % n;
    let mut triangles = Vec::with_capacity(2 * n * n_radial);
    for i in 0..n_radial {
        for j in 0..n {
            let (a, b, cc, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            for tri in [[a, b, cc], [a, cc, d]] {
                let area = signed_area(&vertices[tri[0]], &vertices[tri[1]], &vertices[tri[2]]);
                triangles.push(if area < 0.0 { [tri[0], tri[2], tri[1]] } else { tri });
            }
        }
    }
    let mesh = TriMesh::from_parts(vertices, triangles, 2.0 * PI * r / n as f64)?;
    let circle_facets = mesh
        .facets
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.is_interior() && f.vertices.iter().all(|&v| v < n))
        .map(|(i, _)| i)
        .collect();
    Ok(FittedMesh {
        mesh,
        center: c,
        radius: r,
        n_circle,
        n_radial,
        blend,
        circle_facets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AleConfig {
    pub degree: usize,
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub gravity: [f64; 2],
    pub n_circle: usize,
    pub n_radial: usize,
    pub aitken_tol: f64,
    pub aitken_max_iters: usize,
    pub initial_center: [f64; 2],
    pub radius: f64,
}

impl Default for AleConfig {
    fn default() -> Self {
        Self {
            degree: 4,
            scheme: Scheme::Bdf2,
            dt: 1.0 / 3200.0,
            t_end: 1.0,
            gravity: [0.0, -1.0],
            n_circle: 128,
            n_radial: 32,
            aitken_tol: 1e-8,
            aitken_max_iters: 25,
            initial_center: [0.5, 0.8],
            radius: 0.1,
        }
    }
}

impl AleConfig {
    /// Time-integration settings shared with the Eulerian stepper.
    pub fn scheme_config(&self) -> SchemeConfig {
        SchemeConfig {
            k: self.degree,
            dt: self.dt,
            t_end: self.t_end,
            scheme: self.scheme,
            gravity: self.gravity,
            aitken_tol: self.aitken_tol,
            aitken_max_iters: self.aitken_max_iters,
            initial_center: self.initial_center,
            radius: self.radius,
            ..SchemeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree == 0 || self.degree > 7 {
            return Err(Error::InvalidArgument(format!("degree {} outside 1..=7", self.degree)));
        }
        if !(self.dt > 0.0) || !(self.t_end > 0.0) {
            return Err(Error::InvalidArgument("dt and t_end must be positive".into()));
        }
        Ok(())
    }
}

/// Boundary values of one solve.
pub enum BoundaryData<'a> {
    /// `u = xi` on the circle and `0` on the square.
    RigidBody(Vector2<f64>),
    /// `u = g(x)` on the whole boundary.
    Function(&'a dyn Fn(&Point2<f64>) -> [f64; 2]),
}

/// Result of one fluid solve on a deformed mesh.
pub struct AleFluid {
    pub u: Vec<[f64; 2]>,
    pub force: Vector2<f64>,
    pub vertices: Vec<Point2<f64>>,
    mass: SparseMatrix,
    stiffness: SparseMatrix,
    convection: SparseMatrix,
}

pub struct AleSolver {
    pub config: AleConfig,
    pub fitted: FittedMesh,
    pub layout: DofLayout,
    refd: ReferenceData,
    /// `int lambda_v (d phi_b / d lambda_i) phi_a`, indexed `[v][i][a * nl + b]`.
    conv: [[Vec<f64>; 3]; 3],
    pattern: Pattern,
    pub circle_dof: Vec<bool>,
    history: Vec<(RigidState, Vec<[f64; 2]>)>,
    pub records: Vec<StepRecord>,
    /// Symbolic analysis and the latest factorisation of the symmetric part.
    factors: Mutex<(SymbolicCache, Option<FactoredSystem>)>,
}

impl AleSolver {
    pub fn new(config: AleConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.scheme_config();
        let fitted = build_fitted_mesh(config.n_circle, config.n_radial, &cfg.initial_state())?;
        Self::with_mesh(config, fitted)
    }

    pub fn with_mesh(config: AleConfig, fitted: FittedMesh) -> Result<Self> {
        config.validate()?;
        let layout = DofLayout::new(&fitted.mesh, config.degree)?;
        let refd = ReferenceData::new(config.degree, 2 * config.degree);
        let el = &refd.element;
        let nl = el.n_local();
        let rule = crate::quadrature::TriangleRule::new(2 * config.degree);
        let mut conv: [[Vec<f64>; 3]; 3] = Default::default();
        for row in conv.iter_mut() {
            for m in row.iter_mut() {
                *m = vec![0.0; nl * nl];
            }
        }
        let mut vals = vec![0.0; nl];
        let mut ders = vec![[0.0; 3]; nl];
        for (p, w) in rule.points.iter().zip(&rule.weights) {
            let bary = [1.0 - p[0] - p[1], p[0], p[1]];
            el.eval_bary_derivs(bary, &mut vals, &mut ders);
            for v in 0..3 {
                for i in 0..3 {
                    let m = &mut conv[v][i];
                    for a in 0..nl {
                        for b in 0..nl {
                            m[a * nl + b] += w * bary[v] * ders[b][i] * vals[a];
                        }
                    }
                }
            }
        }
        let groups: Vec<Vec<u32>> = (0..fitted.mesh.n_triangles())
            .map(|t| layout.element_dofs(t).iter().map(|&d| d as u32).collect())
            .collect();
        let pattern = Pattern::from_groups(layout.n_dofs, groups.iter().map(Vec::as_slice));

        let mut circle_dof = vec![false; layout.n_dofs];
        for &f in &fitted.circle_facets {
            let t = fitted.mesh.facets[f].triangles.0;
            let e = fitted.mesh.triangle_facets[t].iter().position(|&g| g == f).unwrap();
            for (a, node) in el.nodes.iter().enumerate() {
                if node[(e + 2) % 3] == 0 {
                    circle_dof[layout.element_dofs(t)[a]] = true;
                }
            }
        }
        let state = cfg_state(&config);
        let n = layout.n_dofs;
        let records = vec![StepRecord {
            step: 0,
            t: 0.0,
            state,
            force: Vector2::zeros(),
            iterations: 0,
            energy_residual: Some(0.0),
            n_active: fitted.mesh.n_triangles(),
            k_strip: 0,
            delta_h: 0.0,
            n_dofs: 2 * n,
        }];
        Ok(Self {
            config,
            fitted,
            layout,
            refd,
            conv,
            pattern,
            circle_dof,
            history: vec![(state, vec![[0.0; 2]; n])],
            records,
            factors: Mutex::new((SymbolicCache::new(), None)),
        })
    }

    pub fn state(&self) -> RigidState {
        self.history.last().unwrap().0
    }

    pub fn velocity(&self) -> &[[f64; 2]] {
        &self.history.last().unwrap().1
    }

    /// Overrides the current velocity field (for prescribed initial data).
    pub fn set_velocity(&mut self, u: Vec<[f64; 2]>) -> Result<()> {
        if u.len() != self.layout.n_dofs {
            return Err(Error::InvalidArgument("velocity length mismatch".into()));
        }
        self.history.last_mut().unwrap().1 = u;
        Ok(())
    }

    pub fn time(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.t)
    }

    fn states(&self) -> Vec<RigidState> {
        self.history.iter().map(|h| h.0).collect()
    }

    fn bdf2(&self) -> bool {
        self.config.scheme == Scheme::Bdf2 && self.history.len() >= 2
    }

    /// DOF coordinates on the mesh deformed by `d`.
    pub fn dof_coords(&self, d: Vector2<f64>) -> Vec<Point2<f64>> {
        let x = self.fitted.deformed_vertices(d);
        let el = &self.refd.element;
        let mut out = vec![Point2::origin(); self.layout.n_dofs];
        for t in 0..self.fitted.mesh.n_triangles() {
            let [a, b, c] = self.fitted.mesh.triangles[t];
            let k = el.degree as f64;
            for (i, node) in el.nodes.iter().enumerate() {
                let p = (x[a].coords * node[0] as f64 + x[b].coords * node[1] as f64 + x[c].coords * node[2] as f64) / k;
                out[self.layout.element_dofs(t)[i]] = Point2::from(p);
            }
        }
        out
    }

    fn assemble(&self, x: &[Point2<f64>], w: Vector2<f64>) -> Result<(SparseMatrix, SparseMatrix, SparseMatrix)> {
        let nl = self.refd.n_local();
        let mut m = self.pattern.zeros();
        let mut a = self.pattern.zeros();
        let mut c = self.pattern.zeros();
        let mut lm = vec![0.0; nl * nl];
        let mut la = vec![0.0; nl * nl];
        let mut lc = vec![0.0; nl * nl];
        let mut dofs = vec![0u32; nl];
        for (t, tri) in self.fitted.mesh.triangles.iter().enumerate() {
            let geom = TriGeom::new([x[tri[0]], x[tri[1]], x[tri[2]]])?;
            self.refd.mass_on(&geom, &mut lm);
            self.refd.stiffness_on(&geom, &mut la);
            lc.iter_mut().for_each(|v| *v = 0.0);
            if w != Vector2::zeros() {
                let jac = 2.0 * geom.area;
                for v in 0..3 {
                    let chi = self.fitted.blend[tri[v]];
                    if chi == 0.0 {
                        continue;
                    }
                    for i in 0..3 {
                        let s = jac * chi * w.dot(&geom.grad_bary[i]);
                        for (o, r) in lc.iter_mut().zip(&self.conv[v][i]) {
                            *o += s * r;
                        }
                    }
                }
            }
            for (d, &g) in dofs.iter_mut().zip(self.layout.element_dofs(t)) {
                *d = g as u32;
            }
            m.add_local(&dofs, &dofs, &lm);
            a.add_local(&dofs, &dofs, &la);
            c.add_local(&dofs, &dofs, &lc);
        }
        Ok((m, a, c))
    }

    /// Solves the fluid problem on the mesh of `center`, moving with velocity
    /// `mesh_velocity`, for the given boundary data.
    pub fn solve_fluid(&self, center: Point2<f64>, mesh_velocity: Vector2<f64>, bc: BoundaryData<'_>) -> Result<AleFluid> {
        let d = center - self.fitted.center;
        let min_det = self.fitted.min_jacobian(d);
        if !(min_det > MIN_JACOBIAN) {
            return Err(Error::MeshTangling {
                min_det,
                displacement: d.norm(),
            });
        }
        let x = self.fitted.deformed_vertices(d);
        let (mass, stiffness, convection) = self.assemble(&x, mesh_velocity)?;
        let dt = self.config.dt;
        let n = self.layout.n_dofs;
        let u1 = &self.history.last().unwrap().1;
        let (a0, hist): (f64, Vec<[f64; 2]>) = if self.bdf2() {
            let u2 = &self.history[self.history.len() - 2].1;
            (
                1.5 / dt,
                u1.iter()
                    .zip(u2)
                    .map(|(p, q)| [(4.0 * p[0] - q[0]) / (2.0 * dt), (4.0 * p[1] - q[1]) / (2.0 * dt)])
                    .collect(),
            )
        } else {
            (1.0 / dt, u1.iter().map(|p| [p[0] / dt, p[1] / dt]).collect())
        };
        let k = mass.combine(a0, &stiffness, 1.0).combine(1.0, &convection, -1.0);
        let mh = mass.matvec2(&hist);

        let on_boundary = &self.layout.on_boundary;
        let coords = if matches!(bc, BoundaryData::Function(_)) {
            self.dof_coords(d)
        } else {
            Vec::new()
        };
        let g: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                if !on_boundary[i] {
                    return [0.0; 2];
                }
                match &bc {
                    BoundaryData::RigidBody(xi) if self.circle_dof[i] => [xi.x, xi.y],
                    BoundaryData::RigidBody(_) => [0.0; 2],
                    BoundaryData::Function(f) => f(&coords[i]),
                }
            })
            .collect();
        let kg = k.matvec2(&g);
        let mut rhs = [vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            for c in 0..2 {
                rhs[c][i] = if on_boundary[i] { g[i][c] } else { mh[i][c] - kg[i][c] };
            }
        }
        let dirichlet = |m: &SparseMatrix, diag: f64| {
            let mut out = m.clone();
            for r in 0..n {
                for p in out.indptr[r]..out.indptr[r + 1] {
                    let col = out.indices[p];
                    if on_boundary[r] || on_boundary[col] {
                        out.values[p] = if r == col { diag } else { 0.0 };
                    }
                }
            }
            out
        };
        let mut sym = dirichlet(&mass.combine(a0, &stiffness, 1.0), 1.0);
        sym.symmetrize();
        let sol = if mesh_velocity == Vector2::zeros() {
            factor_cached(&sym, &mut self.factors.lock().unwrap().0)?.solve_many(&rhs)?
        } else {
            self.solve_convective(&sym, &dirichlet(&convection, 0.0), &rhs)?
        };
        let u: Vec<[f64; 2]> = (0..n)
            .map(|i| if on_boundary[i] { g[i] } else { [sol[0][i], sol[1][i]] })
            .collect();
        // variational force: minus the residual tested with the circle indicator
        let ku = k.matvec2(&u);
        let mut force = Vector2::zeros();
        for i in (0..n).filter(|&i| self.circle_dof[i]) {
            for c in 0..2 {
                force[c] -= ku[i][c] - mh[i][c];
            }
        }
        Ok(AleFluid {
            u,
            force,
            vertices: x,
            mass,
            stiffness,
            convection,
        })
    }

    /// Solves `(S - C) x = b` by defect correction preconditioned with a
    /// factorisation of `S`. The factorisation of an earlier, nearby `S` is tried
    /// first; a fresh one, then LU of the full matrix, take over when the
    /// iteration does not contract.
    fn solve_convective(&self, s: &SparseMatrix, c: &SparseMatrix, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let k = s.combine(1.0, c, -1.0);
        let mut guard = self.factors.lock().unwrap();
        let (cache, stale) = &mut *guard;
        let mut fresh = false;
        loop {
            if stale.is_none() {
                *stale = Some(factor_cached(s, cache)?);
                fresh = true;
            }
            if let Some(x) = defect_correction(stale.as_ref().unwrap(), &k, rhs) {
                return Ok(x);
            }
            if fresh {
                break;
            }
            *stale = None;
        }
        log::debug!("defect correction stalled, using LU");
        factor(&k)?.solve_many(rhs)
    }

    /// Coupled step with the relaxed fixed-point iteration.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let cfg = self.config.scheme_config();
        let states = self.states();
        let prev = *states.last().unwrap();
        let mut guess = prev.xi;
        let mut omega = 1.0;
        let mut r_prev: Option<Vector2<f64>> = None;
        let mut last_update = f64::INFINITY;
        for it in 1..=cfg.aitken_max_iters {
            let trial = advance_geometry(&cfg, &states, guess)?;
            let fluid = self.solve_fluid(trial.center, guess, BoundaryData::RigidBody(guess))?;
            let xi_new = ode_update(&cfg, fluid.force, &states);
            let r = xi_new - guess;
            if let Some(rp) = r_prev {
                omega = aitken_update(rp, r, omega);
            }
            let relaxed = guess + omega * r;
            last_update = (relaxed - guess).norm();
            if last_update <= cfg.aitken_tol * relaxed.norm().max(1e-12) {
                let state = advance_geometry(&cfg, &states, xi_new)?;
                let energy = (!self.bdf2() && cfg.scheme == Scheme::Bdf1).then(|| {
                    self.energy_terms(&fluid, xi_new, prev.xi, guess).relative_defect()
                });
                return Ok(self.accept(state, fluid, it, energy));
            }
            r_prev = Some(r);
            guess = relaxed;
        }
        Err(Error::CouplingDiverged {
            iterations: cfg.aitken_max_iters,
            update: last_update,
        })
    }

    /// Step with prescribed mesh motion and boundary data, no coupling.
    pub fn step_prescribed(&mut self, center: Point2<f64>, mesh_velocity: Vector2<f64>, bc: BoundaryData<'_>) -> Result<&StepRecord> {
        let fluid = self.solve_fluid(center, mesh_velocity, bc)?;
        let state = RigidState::new(center, self.fitted.radius, mesh_velocity);
        Ok(self.accept(state, fluid, 1, None))
    }

    fn accept(&mut self, state: RigidState, fluid: AleFluid, iterations: usize, energy: Option<f64>) -> &StepRecord {
        let step = self.records.len();
        let record = StepRecord {
            step,
            t: step as f64 * self.config.dt,
            state,
            force: fluid.force,
            iterations,
            energy_residual: energy,
            n_active: self.fitted.mesh.n_triangles(),
            k_strip: 0,
            delta_h: 0.0,
            n_dofs: 2 * self.layout.n_dofs,
        };
        self.history.push((state, fluid.u));
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        self.records.push(record);
        self.records.last().unwrap()
    }

    /// BDF1 energy identity of the accepted solve, tested with `2 dt (u, xi)`.
    pub fn energy_terms(&self, fluid: &AleFluid, xi: Vector2<f64>, xi_prev: Vector2<f64>, xi_guess: Vector2<f64>) -> AleEnergyTerms {
        let dt = self.config.dt;
        let u = &fluid.u;
        let up = &self.history.last().unwrap().1;
        let jump: Vec<[f64; 2]> = u.iter().zip(up).map(|(a, b)| [a[0] - b[0], a[1] - b[1]]).collect();
        let g = Vector2::new(self.config.gravity[0], self.config.gravity[1]);
        AleEnergyTerms {
            terms: [
                fluid.mass.bilinear2(u, u),
                fluid.mass.bilinear2(&jump, &jump),
                -fluid.mass.bilinear2(up, up),
                -2.0 * dt * fluid.convection.bilinear2(u, u),
                2.0 * dt * fluid.stiffness.bilinear2(u, u),
                xi.norm_squared(),
                (xi - xi_prev).norm_squared(),
                -xi_prev.norm_squared(),
                -2.0 * dt * g.dot(&xi),
                2.0 * dt * fluid.force.dot(&(xi_guess - xi)),
            ],
        }
    }

    pub fn run(&mut self) -> Result<&[StepRecord]> {
        let n = self.config.scheme_config().n_steps();
        while self.records.len() <= n {
            self.step()?;
        }
        Ok(&self.records)
    }

    /// `L2` norm of `u_h - f` on the current deformed mesh.
    pub fn l2_error(&self, f: impl Fn(&Point2<f64>) -> [f64; 2]) -> Result<f64> {
        let d = self.state().center - self.fitted.center;
        let x = self.fitted.deformed_vertices(d);
        let u = self.velocity();
        let el = &self.refd.element;
        let rule = crate::quadrature::TriangleRule::new(2 * el.degree + 2);
        let mut vals = vec![0.0; el.n_local()];
        let mut acc = 0.0;
        for (t, tri) in self.fitted.mesh.triangles.iter().enumerate() {
            let geom = TriGeom::new([x[tri[0]], x[tri[1]], x[tri[2]]])?;
            let (pts, wts) = rule.map(&x[tri[0]], &x[tri[1]], &x[tri[2]]);
            let dofs = self.layout.element_dofs(t);
            for (p, w) in pts.iter().zip(&wts) {
                el.eval(geom.barycentric(p), &mut vals);
                let mut uh = [0.0; 2];
                for (v, &dd) in vals.iter().zip(dofs) {
                    uh[0] += v * u[dd][0];
                    uh[1] += v * u[dd][1];
                }
                let e = f(p);
                acc += w * ((uh[0] - e[0]).powi(2) + (uh[1] - e[1]).powi(2));
            }
        }
        Ok(acc.sqrt())
    }
}

fn defect_correction(precond: &FactoredSystem, k: &SparseMatrix, rhs: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let norm = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let target = DEFECT_TOLERANCE * norm(rhs);
    let mut x = precond.apply_inverse(rhs);
    let mut last = f64::INFINITY;
    for _ in 0..DEFECT_MAX_ITERS {
        let res: Vec<Vec<f64>> = rhs
            .iter()
            .zip(&x)
            .map(|(b, xc)| b.iter().zip(k.matvec(xc)).map(|(p, q)| p - q).collect())
            .collect();
        let r = norm(&res);
        if !r.is_finite() || r > DEFECT_CONTRACTION * last {
            return None;
        }
        if r <= target {
            return Some(x);
        }
        last = r;
        for (xc, dc) in x.iter_mut().zip(precond.apply_inverse(&res)) {
            xc.iter_mut().zip(dc).for_each(|(a, b)| *a += b);
        }
    }
    None
}

fn cfg_state(config: &AleConfig) -> RigidState {
    config.scheme_config().initial_state()
}

/// Terms of the ALE energy identity; they sum to zero for an exact solve.
#[derive(Clone, Debug, PartialEq)]
pub struct AleEnergyTerms {
    pub terms: [f64; 10],
}

impl AleEnergyTerms {
    pub fn relative_defect(&self) -> f64 {
        let largest = self.terms.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        if largest == 0.0 {
            0.0
        } else {
            self.terms.iter().sum::<f64>().abs() / largest
        }
    }
}

/// Runs the coupled ALE problem to `t_end` and returns its trajectory.
pub fn run_reference(config: &AleConfig) -> Result<Vec<TrajectoryRow>> {
    let mut solver = AleSolver::new(config.clone())?;
    solver.run()?;
    Ok(solver.records.iter().map(TrajectoryRow::from).collect())
}
