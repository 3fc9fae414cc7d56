//! Bilinear forms of the discrete scheme. Every form acts componentwise on the
//! vector-valued unknowns, so only the scalar matrices are assembled.

use nalgebra::{Point2, Vector2};

use crate::cutquad::{CutQuadrature, CutRule};
use crate::error::{Error, Result};
use crate::fe::{LagrangeElement, TriGeom};
use crate::geometry::ActiveDecomposition;
use crate::mesh::TriMesh;
use crate::quadrature::TriangleRule;
use crate::sparse::{Pattern, SparseMatrix};
use crate::spaces::{DofMap, FeFunction};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilizationParams {
    pub gamma_s: f64,
    pub gamma_lambda: f64,
    /// `c` in the Nitsche penalty `c k^2 / h`.
    pub nitsche_penalty: f64,
    /// Strip crossing bound `K` of the current step.
    pub k_strip: usize,
}

impl Default for StabilizationParams {
    fn default() -> Self {
        Self {
            gamma_s: 0.1,
            gamma_lambda: 0.01,
            nitsche_penalty: 40.0,
            k_strip: 1,
        }
    }
}

impl StabilizationParams {
    pub fn gamma_gp(&self) -> f64 {
        self.gamma_s * self.k_strip as f64
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.gamma_s, self.gamma_lambda, self.nitsche_penalty]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok || self.k_strip == 0 {
            return Err(Error::InvalidArgument(format!("invalid stabilisation parameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementKind {
    /// Entirely in the discrete fluid domain.
    Inside,
    /// Cut by the discrete interface.
    Interface,
    /// Active strip element without fluid.
    Outside,
}

/// Quadrature data of one step: element kinds and cut rules per background element.
#[derive(Clone, Debug)]
pub struct CutGeometry {
    /// Global mesh size used in every scaling.
    pub h: f64,
    pub order: usize,
    kinds: Vec<Option<ElementKind>>,
    rules: Vec<Option<CutRule>>,
}

impl CutGeometry {
    pub fn new(mesh: &TriMesh, decomp: &ActiveDecomposition, order: usize) -> Result<Self> {
        let quad = CutQuadrature::new(order);
        let nt = mesh.n_triangles();
        let mut kinds = vec![None; nt];
        let mut rules = vec![None; nt];
        for &t in &decomp.active_elements {
            let phi = decomp.element_phi(mesh, t);
            let kind = if decomp.is_interface(t) {
                rules[t] = Some(quad.cut(&mesh.triangle_points(t), &phi)?);
                ElementKind::Interface
            } else if phi.iter().all(|&p| p < 0.0) {
                ElementKind::Inside
            } else {
                ElementKind::Outside
            };
            kinds[t] = Some(kind);
        }
        Ok(Self {
            h: mesh.h_max,
            order,
            kinds,
            rules,
        })
    }

    pub fn kind(&self, t: usize) -> Option<ElementKind> {
        self.kinds.get(t).copied().flatten()
    }

    pub fn rule(&self, t: usize) -> Option<&CutRule> {
        self.rules.get(t).and_then(Option::as_ref)
    }

    fn interface_rule(&self, t: usize) -> Result<&CutRule> {
        self.rule(t).ok_or(Error::MissingCutRule(t))
    }

    /// Area of the discrete fluid domain.
    pub fn fluid_area(&self, mesh: &TriMesh) -> f64 {
        (0..self.kinds.len())
            .map(|t| match self.kind(t) {
                Some(ElementKind::Inside) => mesh.area(t),
                Some(ElementKind::Interface) => self.rule(t).map_or(0.0, CutRule::volume),
                _ => 0.0,
            })
            .sum()
    }

    pub fn interface_length(&self) -> f64 {
        self.rules.iter().flatten().map(CutRule::interface_length).sum()
    }
}

/// Reference-element integrals used on uncut elements.
#[derive(Clone, Debug)]
pub struct ReferenceData {
    pub element: LagrangeElement,
    pub rule: TriangleRule,
    /// `int phi_a phi_b` over the reference triangle.
    mass: Vec<f64>,
    /// `int d phi_a / d lambda_i * d phi_b / d lambda_j`, indexed `[i][j][a * nl + b]`.
    stiff: [[Vec<f64>; 3]; 3],
}

impl ReferenceData {
    pub fn new(degree: usize, order: usize) -> Self {
        let element = LagrangeElement::new(degree);
        let rule = TriangleRule::new(order);
        let nl = element.n_local();
        let nq = rule.weights.len();
        let mut vals = vec![0.0; nq * nl];
        let mut ders = vec![[0.0; 3]; nq * nl];
        for (q, p) in rule.points.iter().enumerate() {
            let bary = [1.0 - p[0] - p[1], p[0], p[1]];
            element.eval_bary_derivs(bary, &mut vals[q * nl..(q + 1) * nl], &mut ders[q * nl..(q + 1) * nl]);
        }
        let mut mass = vec![0.0; nl * nl];
        let mut stiff: [[Vec<f64>; 3]; 3] = Default::default();
        for row in stiff.iter_mut() {
            for m in row.iter_mut() {
                *m = vec![0.0; nl * nl];
            }
        }
        for (q, w) in rule.weights.iter().enumerate() {
            for a in 0..nl {
                for b in 0..nl {
                    mass[a * nl + b] += w * vals[q * nl + a] * vals[q * nl + b];
                    for i in 0..3 {
                        for j in 0..3 {
                            stiff[i][j][a * nl + b] += w * ders[q * nl + a][i] * ders[q * nl + b][j];
                        }
                    }
                }
            }
        }
        Self {
            element,
            rule,
            mass,
            stiff,
        }
    }

    pub fn n_local(&self) -> usize {
        self.element.n_local()
    }

    pub fn mass_on(&self, geom: &TriGeom, out: &mut [f64]) {
        let jac = 2.0 * geom.area;
        for (o, m) in out.iter_mut().zip(&self.mass) {
            *o = jac * m;
        }
    }

    pub fn stiffness_on(&self, geom: &TriGeom, out: &mut [f64]) {
        let jac = 2.0 * geom.area;
        out.iter_mut().for_each(|o| *o = 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let g = jac * geom.grad_bary[i].dot(&geom.grad_bary[j]);
                for (o, s) in out.iter_mut().zip(&self.stiff[i][j]) {
                    *o += g * s;
                }
            }
        }
    }
}

/// Values and gradients of the element basis at arbitrary points.
struct PointEval {
    vals: Vec<f64>,
    grads: Vec<Vector2<f64>>,
}

impl PointEval {
    fn new(nl: usize) -> Self {
        Self {
            vals: vec![0.0; nl],
            grads: vec![Vector2::zeros(); nl],
        }
    }

    fn at(&mut self, el: &LagrangeElement, geom: &TriGeom, x: &Point2<f64>) {
        el.eval_with_grad(geom, geom.barycentric(x), &mut self.vals, &mut self.grads);
    }
}

fn geom_of(mesh: &TriMesh, t: usize) -> Result<TriGeom> {
    TriGeom::new(mesh.triangle_points(t))
}

/// Union of the element couplings of `space` and the facet-patch couplings of the strip.
pub fn velocity_pattern(mesh: &TriMesh, space: &DofMap, decomp: &ActiveDecomposition) -> Pattern {
    let n = space.n_active_dofs();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    for s in 0..space.elements.len() {
        let d = space.slot_dofs(s);
        for &a in d {
            rows[a as usize].extend(d.iter().map(|&b| b as usize));
        }
    }
    for &f in &decomp.strip_facets {
        let (t1, t2) = (mesh.facets[f].triangles.0, mesh.facets[f].triangles.1.unwrap());
        if let (Some(d1), Some(d2)) = (space.element_dofs(t1), space.element_dofs(t2)) {
            for &a in d1 {
                rows[a as usize].extend(d2.iter().map(|&b| b as usize));
            }
            for &a in d2 {
                rows[a as usize].extend(d1.iter().map(|&b| b as usize));
            }
        }
    }
    Pattern::from_rows(n, rows)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Integrand {
    Mass,
    Stiffness,
}

fn assemble_volume(
    mesh: &TriMesh,
    space: &DofMap,
    geo: &CutGeometry,
    refd: &ReferenceData,
    pattern: &Pattern,
    what: Integrand,
    fluid_only: bool,
) -> Result<SparseMatrix> {
    let nl = refd.n_local();
    let el = &space.layout.element;
    let mut out = pattern.zeros();
    let mut local = vec![0.0; nl * nl];
    let mut pe = PointEval::new(nl);
    for (s, &t) in space.elements.iter().enumerate() {
        let geom = geom_of(mesh, t)?;
        let kind = if fluid_only {
            geo.kind(t).ok_or(Error::MissingCutRule(t))?
        } else {
            ElementKind::Inside
        };
        match kind {
            ElementKind::Outside => continue,
            ElementKind::Inside => match what {
                Integrand::Mass => refd.mass_on(&geom, &mut local),
                Integrand::Stiffness => refd.stiffness_on(&geom, &mut local),
            },
            ElementKind::Interface => {
                let rule = geo.interface_rule(t)?;
                local.iter_mut().for_each(|v| *v = 0.0);
                for (x, w) in rule.volume_points.iter().zip(&rule.volume_weights) {
                    pe.at(el, &geom, x);
                    for a in 0..nl {
                        for b in 0..nl {
                            local[a * nl + b] += w * match what {
                                Integrand::Mass => pe.vals[a] * pe.vals[b],
                                Integrand::Stiffness => pe.grads[a].dot(&pe.grads[b]),
                            };
                        }
                    }
                }
            }
        }
        let d = space.slot_dofs(s);
        out.add_local(d, d, &local);
    }
    Ok(out)
}

/// `(M v, w) = int_{Omega_h} v w`.
pub fn assemble_mass(
    mesh: &TriMesh,
    space: &DofMap,
    geo: &CutGeometry,
    refd: &ReferenceData,
    pattern: &Pattern,
) -> Result<SparseMatrix> {
    assemble_volume(mesh, space, geo, refd, pattern, Integrand::Mass, true)
}

/// `(A v, w) = int_{Omega_h} grad v . grad w`.
pub fn assemble_stiffness(
    mesh: &TriMesh,
    space: &DofMap,
    geo: &CutGeometry,
    refd: &ReferenceData,
    pattern: &Pattern,
) -> Result<SparseMatrix> {
    assemble_volume(mesh, space, geo, refd, pattern, Integrand::Stiffness, true)
}

/// Stiffness over the whole active domain, cut or not.
pub fn assemble_full_stiffness(
    mesh: &TriMesh,
    space: &DofMap,
    geo: &CutGeometry,
    refd: &ReferenceData,
    pattern: &Pattern,
) -> Result<SparseMatrix> {
    assemble_volume(mesh, space, geo, refd, pattern, Integrand::Stiffness, false)
}

/// Direct ghost penalty `h^-2 sum_F int_{omega_F} [u][v]` over the strip facets.
pub fn assemble_ghost_penalty(
    mesh: &TriMesh,
    space: &DofMap,
    decomp: &ActiveDecomposition,
    h: f64,
    refd: &ReferenceData,
    pattern: &Pattern,
) -> Result<SparseMatrix> {
    let el = &space.layout.element;
    let nl = el.n_local();
    let mut out = pattern.zeros();
    let mut jump = vec![0.0; 2 * nl];
    let mut local = vec![0.0; 4 * nl * nl];
    let mut rows: Vec<u32> = Vec::with_capacity(2 * nl);
    let mut v1 = vec![0.0; nl];
    let mut v2 = vec![0.0; nl];
    let scale = 1.0 / (h * h);
    for &f in &decomp.strip_facets {
        let (t1, t2) = mesh.facet_patch(f)?;
        let (Some(d1), Some(d2)) = (space.element_dofs(t1), space.element_dofs(t2)) else {
            continue;
        };
        let (g1, g2) = (geom_of(mesh, t1)?, geom_of(mesh, t2)?);
        local.iter_mut().for_each(|v| *v = 0.0);
        for g in [&g1, &g2] {
            let [a, b, c] = g.points;
            let (pts, wts) = refd.rule.map(&a, &b, &c);
            for (x, w) in pts.iter().zip(&wts) {
                el.eval(g1.barycentric(x), &mut v1);
                el.eval(g2.barycentric(x), &mut v2);
                jump[..nl].copy_from_slice(&v1);
                for (j, v) in jump[nl..].iter_mut().zip(&v2) {
                    *j = -v;
                }
                for i in 0..2 * nl {
                    let wi = w * scale * jump[i];
                    for j in 0..2 * nl {
                        local[i * 2 * nl + j] += wi * jump[j];
                    }
                }
            }
        }
        rows.clear();
        rows.extend_from_slice(d1);
        rows.extend_from_slice(d2);
        out.add_local(&rows, &rows, &local);
    }
    Ok(out)
}

/// `(B u)_mu = int_{Gamma_h} mu u`, of size `n_mult x n_vel`.
pub fn assemble_coupling_b(
    mesh: &TriMesh,
    vel: &DofMap,
    mult: &DofMap,
    geo: &CutGeometry,
) -> Result<SparseMatrix> {
    if mult.elements.is_empty() {
        return Err(Error::EmptyInterface);
    }
    let (eu, el) = (&vel.layout.element, &mult.layout.element);
    let (nu, nlam) = (eu.n_local(), el.n_local());
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); mult.n_active_dofs()];
    for &t in &mult.elements {
        let du = vel.element_dofs(t).ok_or(Error::MissingCutRule(t))?;
        for &a in mult.element_dofs(t).unwrap() {
            rows[a as usize].extend(du.iter().map(|&b| b as usize));
        }
    }
    let mut out = Pattern::from_rows(vel.n_active_dofs(), rows).zeros();
    let mut vu = vec![0.0; nu];
    let mut vl = vec![0.0; nlam];
    let mut local = vec![0.0; nlam * nu];
    for &t in &mult.elements {
        let geom = geom_of(mesh, t)?;
        let rule = geo.interface_rule(t)?;
        local.iter_mut().for_each(|v| *v = 0.0);
        for (x, w) in rule.interface_points.iter().zip(&rule.interface_weights) {
            let bary = geom.barycentric(x);
            eu.eval(bary, &mut vu);
            el.eval(bary, &mut vl);
            for a in 0..nlam {
                for b in 0..nu {
                    local[a * nu + b] += w * vl[a] * vu[b];
                }
            }
        }
        out.add_local(mult.element_dofs(t).unwrap(), vel.element_dofs(t).unwrap(), &local);
    }
    Ok(out)
}

/// `h^2 int_{O_Gamma} (n . grad lambda)(n . grad mu)` over whole interface elements.
pub fn assemble_multiplier_stab(mesh: &TriMesh, mult: &DofMap, geo: &CutGeometry) -> Result<SparseMatrix> {
    let el = &mult.layout.element;
    let nl = el.n_local();
    let pattern = Pattern::from_groups(mult.n_active_dofs(), (0..mult.elements.len()).map(|s| mult.slot_dofs(s)));
    let mut out = pattern.zeros();
    let rule = TriangleRule::new(2 * el.degree.saturating_sub(1));
    let mut pe = PointEval::new(nl);
    let mut dn = vec![0.0; nl];
    let mut local = vec![0.0; nl * nl];
    let h2 = geo.h * geo.h;
    for (s, &t) in mult.elements.iter().enumerate() {
        let geom = geom_of(mesh, t)?;
        let n = geo.interface_rule(t)?.normal.ok_or(Error::NoSignChange)?;
        let [a, b, c] = geom.points;
        let (pts, wts) = rule.map(&a, &b, &c);
        local.iter_mut().for_each(|v| *v = 0.0);
        for (x, w) in pts.iter().zip(&wts) {
            pe.at(el, &geom, x);
            for (d, g) in dn.iter_mut().zip(&pe.grads) {
                *d = n.dot(g);
            }
            for i in 0..nl {
                for j in 0..nl {
                    local[i * nl + j] += h2 * w * dn[i] * dn[j];
                }
            }
        }
        let d = mult.slot_dofs(s);
        out.add_local(d, d, &local);
    }
    Ok(out)
}

/// Symmetric Nitsche terms on the velocity pattern. Returns the matrix and the
/// vector `r` such that the right-hand side of component `c` is `r * xi[c]`.
pub fn assemble_nitsche(
    mesh: &TriMesh,
    vel: &DofMap,
    geo: &CutGeometry,
    params: &StabilizationParams,
    pattern: &Pattern,
) -> Result<(SparseMatrix, Vec<f64>)> {
    let el = &vel.layout.element;
    let nl = el.n_local();
    let k = el.degree as f64;
    let beta = params.nitsche_penalty * k * k / geo.h;
    let mut out = pattern.zeros();
    let mut rhs = vec![0.0; vel.n_active_dofs()];
    let mut pe = PointEval::new(nl);
    let mut dn = vec![0.0; nl];
    let mut local = vec![0.0; nl * nl];
    let mut lr = vec![0.0; nl];
    for (s, &t) in vel.elements.iter().enumerate() {
        if geo.kind(t) != Some(ElementKind::Interface) {
            continue;
        }
        let rule = geo.interface_rule(t)?;
        // outward normal of the fluid domain
        let n_out = -rule.normal.ok_or(Error::NoSignChange)?;
        let geom = geom_of(mesh, t)?;
        local.iter_mut().for_each(|v| *v = 0.0);
        lr.iter_mut().for_each(|v| *v = 0.0);
        for (x, w) in rule.interface_points.iter().zip(&rule.interface_weights) {
            pe.at(el, &geom, x);
            for (d, g) in dn.iter_mut().zip(&pe.grads) {
                *d = n_out.dot(g);
            }
            for a in 0..nl {
                lr[a] += w * (-dn[a] + beta * pe.vals[a]);
                for b in 0..nl {
                    local[a * nl + b] +=
                        w * (-dn[b] * pe.vals[a] - dn[a] * pe.vals[b] + beta * pe.vals[a] * pe.vals[b]);
                }
            }
        }
        let d = vel.slot_dofs(s);
        out.add_local(d, d, &local);
        for (a, &i) in d.iter().enumerate() {
            rhs[i as usize] += lr[a];
        }
    }
    Ok((out, rhs))
}

/// `int_{Gamma_h} f` componentwise.
pub fn interface_integral(mesh: &TriMesh, f: &FeFunction, geo: &CutGeometry) -> Result<[f64; 2]> {
    let mut acc = [0.0; 2];
    for &t in &f.map.elements {
        let Some(rule) = geo.rule(t) else { continue };
        for (x, w) in rule.interface_points.iter().zip(&rule.interface_weights) {
            let v = f.eval(mesh, t, x)?;
            acc[0] += w * v[0];
            acc[1] += w * v[1];
        }
    }
    Ok(acc)
}

/// Interface flux `int_{Gamma_h} (-d_n u + c k^2/h (u - xi))` with `n` the outward
/// normal of the fluid; the force functional of the Nitsche variant.
pub fn nitsche_force(
    mesh: &TriMesh,
    u: &FeFunction,
    geo: &CutGeometry,
    params: &StabilizationParams,
    xi: Vector2<f64>,
) -> Result<[f64; 2]> {
    let k = u.map.degree() as f64;
    let beta = params.nitsche_penalty * k * k / geo.h;
    let mut acc = [0.0; 2];
    for &t in &u.map.elements {
        if geo.kind(t) != Some(ElementKind::Interface) {
            continue;
        }
        let rule = geo.interface_rule(t)?;
        let n_out = -rule.normal.ok_or(Error::NoSignChange)?;
        for (x, w) in rule.interface_points.iter().zip(&rule.interface_weights) {
            let v = u.eval(mesh, t, x)?;
            let g = u.eval_grad(mesh, t, x)?;
            for c in 0..2 {
                acc[c] += w * (-g[c].dot(&n_out) + beta * (v[c] - xi[c]));
            }
        }
    }
    Ok(acc)
}

/// Squared contributions of the mesh-dependent norms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TripleNorm {
    /// `||grad u||^2` over the active domain.
    pub grad_u: f64,
    /// `||h^-1/2 u||^2` on the interface.
    pub u_interface: f64,
    /// `||h^1/2 lambda||^2` on the interface.
    pub lambda_interface: f64,
    /// `||h n . grad lambda||^2` over the interface elements.
    pub lambda_stab: f64,
}

pub fn compute_triple_norm(
    mesh: &TriMesh,
    u: &FeFunction,
    lam: Option<&FeFunction>,
    geo: &CutGeometry,
    refd: &ReferenceData,
) -> Result<TripleNorm> {
    let el = &u.map.layout.element;
    let nl = el.n_local();
    let mut local = vec![0.0; nl * nl];
    let mut grad_u = 0.0;
    for (s, &t) in u.map.elements.iter().enumerate() {
        refd.stiffness_on(&geom_of(mesh, t)?, &mut local);
        let d = u.map.slot_dofs(s);
        for a in 0..nl {
            for b in 0..nl {
                let (ua, ub) = (u.coeffs[d[a] as usize], u.coeffs[d[b] as usize]);
                grad_u += local[a * nl + b] * (ua[0] * ub[0] + ua[1] * ub[1]);
            }
        }
    }
    let gamma_sq = |f: &FeFunction| -> Result<f64> {
        let mut acc = 0.0;
        for &t in &f.map.elements {
            let Some(rule) = geo.rule(t) else { continue };
            for (x, w) in rule.interface_points.iter().zip(&rule.interface_weights) {
                let v = f.eval(mesh, t, x)?;
                acc += w * (v[0] * v[0] + v[1] * v[1]);
            }
        }
        Ok(acc)
    };
    let mut out = TripleNorm {
        grad_u,
        u_interface: gamma_sq(u)? / geo.h,
        ..Default::default()
    };
    if let Some(lam) = lam {
        out.lambda_interface = geo.h * gamma_sq(lam)?;
        let j = assemble_multiplier_stab(mesh, &lam.map, geo)?;
        out.lambda_stab = j.bilinear2(&lam.coeffs, &lam.coeffs);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{classify, RigidState};
    use crate::mesh::build_structured_mesh;
    use crate::spaces::{build_multiplier_space, build_velocity_space};
    use std::sync::Arc;

    struct Setup {
        mesh: TriMesh,
        decomp: ActiveDecomposition,
        vel: Arc<DofMap>,
        geo: CutGeometry,
        refd: ReferenceData,
        pattern: Pattern,
    }

    fn setup(h: f64, k: usize, delta: f64) -> Setup {
        let mesh = build_structured_mesh(h).unwrap();
        let decomp = classify(&mesh, &RigidState::initial(), delta).unwrap();
        let vel = Arc::new(build_velocity_space(&mesh, &decomp, k).unwrap());
        let geo = CutGeometry::new(&mesh, &decomp, 2 * k).unwrap();
        let refd = ReferenceData::new(k, 2 * k);
        let pattern = velocity_pattern(&mesh, &vel, &decomp);
        Setup {
            mesh,
            decomp,
            vel,
            geo,
            refd,
            pattern,
        }
    }

    #[test]
    fn reference_stiffness_p1() {
        let mesh = TriMesh::from_parts(
            vec![Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)],
            vec![[0, 1, 2]],
            1.0,
        )
        .unwrap();
        let refd = ReferenceData::new(1, 2);
        let mut k = vec![0.0; 9];
        refd.stiffness_on(&geom_of(&mesh, 0).unwrap(), &mut k);
        let expect = [1.0, -0.5, -0.5, -0.5, 0.5, 0.0, -0.5, 0.0, 0.5];
        for (a, b) in k.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mass_of_constant_is_fluid_area() {
        let area = 1.0 - std::f64::consts::PI * 0.01;
        let mut errs = Vec::new();
        for h in [0.05, 0.025] {
            let s = setup(h, 2, 0.0);
            let m = assemble_mass(&s.mesh, &s.vel, &s.geo, &s.refd, &s.pattern).unwrap();
            let one = vec![[1.0, 1.0]; s.vel.n_active_dofs()];
            let v = m.bilinear2(&one, &one);
            assert!((v - 2.0 * s.geo.fluid_area(&s.mesh)).abs() < 1e-12);
            assert!(m.max_asymmetry() < 1e-14);
            errs.push((v / 2.0 - area).abs() / area);
        }
        // the linear level set cuts a polygon: second order in h
        assert!(errs[1] < 1e-3);
        assert!(errs[0] / errs[1] > 3.0);
    }

    #[test]
    fn stiffness_kernel_and_linear() {
        let s = setup(0.1, 2, 0.02);
        let a = assemble_stiffness(&s.mesh, &s.vel, &s.geo, &s.refd, &s.pattern).unwrap();
        let one = vec![[1.0, -2.0]; s.vel.n_active_dofs()];
        assert!(a.matvec2(&one).iter().all(|v| v[0].abs() < 1e-12 && v[1].abs() < 1e-12));
        let x = FeFunction::interpolate(s.vel.clone(), |p| [p.x, 0.0]);
        let e = a.bilinear2(&x.coeffs, &x.coeffs);
        assert!((e - s.geo.fluid_area(&s.mesh)).abs() < 1e-12);
        assert!(a.max_asymmetry() < 1e-13);
    }

    #[test]
    fn exterior_strip_has_no_mass() {
        let s = setup(0.1, 2, 0.05);
        let m = assemble_mass(&s.mesh, &s.vel, &s.geo, &s.refd, &s.pattern).unwrap();
        // DOFs touching only outside elements
        let mut only_outside = vec![true; s.vel.n_active_dofs()];
        for (slot, &t) in s.vel.elements.iter().enumerate() {
            if s.geo.kind(t) != Some(ElementKind::Outside) {
                for &d in s.vel.slot_dofs(slot) {
                    only_outside[d as usize] = false;
                }
            }
        }
        let v: Vec<[f64; 2]> = only_outside.iter().map(|&b| if b { [1.0, 1.0] } else { [0.0; 2] }).collect();
        assert!(only_outside.iter().any(|&b| b));
        assert_eq!(m.bilinear2(&v, &v), 0.0);
    }

    #[test]
    fn ghost_penalty_polynomial_and_jump() {
        let s = setup(0.1, 2, 0.05);
        let g = assemble_ghost_penalty(&s.mesh, &s.vel, &s.decomp, s.geo.h, &s.refd, &s.pattern).unwrap();
        let p = FeFunction::interpolate(s.vel.clone(), |x| [x.x * x.y - 3.0 * x.x * x.x, 1.0 + x.y]);
        assert!(g.bilinear2(&p.coeffs, &p.coeffs).abs() < 1e-12);
        assert!(g.max_asymmetry() < 1e-12);
        assert!(!s.decomp.strip_facets.is_empty());
    }

    #[test]
    fn ghost_penalty_matches_dense_oracle_on_one_patch() {
        use rand::{Rng, SeedableRng};
        let s = setup(0.1, 2, 0.05);
        let f = s.decomp.strip_facets[0];
        let (t1, t2) = s.mesh.facet_patch(f).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let coeffs: Vec<[f64; 2]> = (0..s.vel.n_active_dofs()).map(|_| [rng.gen_range(-1.0..1.0), 0.0]).collect();
        let u = FeFunction { map: s.vel.clone(), coeffs };
        // single-facet decomposition
        let mut d1 = s.decomp.clone();
        d1.strip_facets = vec![f];
        let g = assemble_ghost_penalty(&s.mesh, &s.vel, &d1, s.geo.h, &s.refd, &s.pattern).unwrap();
        let val = g.bilinear2(&u.coeffs, &u.coeffs);
        // oracle: high-order rule on each triangle, jump of the extended polynomials
        let rule = TriangleRule::new(12);
        let mut oracle = 0.0;
        for t in [t1, t2] {
            let [a, b, c] = s.mesh.triangle_points(t);
            let (pts, wts) = rule.map(&a, &b, &c);
            for (x, w) in pts.iter().zip(&wts) {
                let j = u.eval(&s.mesh, t1, x).unwrap()[0] - u.eval(&s.mesh, t2, x).unwrap()[0];
                oracle += w * j * j;
            }
        }
        oracle /= s.geo.h * s.geo.h;
        assert!((val - oracle).abs() < 1e-12 * oracle.max(1.0), "{val} vs {oracle}");
    }

    #[test]
    fn coupling_and_multiplier_stab() {
        let s = setup(0.05, 2, 0.0);
        let mult = Arc::new(build_multiplier_space(&s.mesh, &s.decomp, 1).unwrap());
        let b = assemble_coupling_b(&s.mesh, &s.vel, &mult, &s.geo).unwrap();
        let lam = vec![[1.0, 0.0]; mult.n_active_dofs()];
        let v = vec![[1.0, 0.0]; s.vel.n_active_dofs()];
        let w = vec![[0.0, 1.0]; s.vel.n_active_dofs()];
        let len = s.geo.interface_length();
        let bv = b.bilinear2(&lam, &v);
        assert!((bv - len).abs() < 1e-12);
        assert!((len - 0.2 * std::f64::consts::PI).abs() < 0.01);
        assert_eq!(b.bilinear2(&lam, &w), 0.0);

        let j = assemble_multiplier_stab(&s.mesh, &mult, &s.geo).unwrap();
        assert!(j.bilinear2(&lam, &lam).abs() < 1e-14);
        // lambda = (phi_lin, 0): n . grad(lambda) = -|grad phi_lin|, close to -1
        let phi = FeFunction::interpolate(mult.clone(), |x| [RigidState::initial().level_set(x), 0.0]);
        let val = j.bilinear2(&phi.coeffs, &phi.coeffs);
        let mut exact = 0.0;
        let mut area = 0.0;
        for &t in &s.decomp.interface_elements {
            let g = TriGeom::new(s.mesh.triangle_points(t)).unwrap();
            let p = s.decomp.element_phi(&s.mesh, t);
            let grad: Vector2<f64> = (0..3).map(|i| g.grad_bary[i] * p[i]).sum();
            exact += s.geo.h * s.geo.h * g.area * grad.norm_squared();
            area += g.area;
        }
        assert!((val - exact).abs() < 1e-12 * val);
        // |grad phi_lin| < 1 near the cone tip, so the ratio sits a little below 1
        let ratio = val / (s.geo.h * s.geo.h * area);
        assert!(ratio > 0.85 && ratio < 1.05);
        assert!(j.max_asymmetry() < 1e-14);
    }

    #[test]
    fn nitsche_examples() {
        let s = setup(0.05, 2, 0.0);
        let params = StabilizationParams::default();
        let (n, r) = assemble_nitsche(&s.mesh, &s.vel, &s.geo, &params, &s.pattern).unwrap();
        assert!(n.max_asymmetry() < 1e-12 * n.max_abs());
        // constant u = xi: residual N u - r xi vanishes
        let xi = [0.3, -0.7];
        let u = vec![xi; s.vel.n_active_dofs()];
        let nu = n.matvec2(&u);
        for (a, ri) in nu.iter().zip(&r) {
            assert!((a[0] - ri * xi[0]).abs() < 1e-9 && (a[1] - ri * xi[1]).abs() < 1e-9);
        }
        // penalty-only row sum: 40 k^2 / h |Gamma_h|
        let one = vec![[1.0, 0.0]; s.vel.n_active_dofs()];
        let total = n.bilinear2(&one, &one);
        let expect = 40.0 * 4.0 / s.geo.h * s.geo.interface_length();
        assert!((total - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn triple_norm_examples() {
        let s = setup(0.05, 2, 0.0);
        let mult = Arc::new(build_multiplier_space(&s.mesh, &s.decomp, 1).unwrap());
        let zero = FeFunction::zeros(s.vel.clone());
        let tn = compute_triple_norm(&s.mesh, &zero, None, &s.geo, &s.refd).unwrap();
        assert_eq!(tn, TripleNorm::default());
        let one = FeFunction::interpolate(s.vel.clone(), |_| [1.0, 0.0]);
        let lam = FeFunction::interpolate(mult, |_| [1.0, 0.0]);
        let tn = compute_triple_norm(&s.mesh, &one, Some(&lam), &s.geo, &s.refd).unwrap();
        let len = s.geo.interface_length();
        assert!(tn.grad_u.abs() < 1e-12);
        assert!((tn.u_interface - len / s.geo.h).abs() < 1e-10);
        assert!((tn.lambda_interface - s.geo.h * len).abs() < 1e-14);
        assert!(tn.lambda_stab.abs() < 1e-14);
    }
}
