//! Rigid disk, its signed-distance level set and the per-step element sets.

use std::collections::VecDeque;

use nalgebra::{Point2, Vector2};

use crate::error::{Error, Result};
use crate::mesh::TriMesh;

/// Vertex values that are exactly zero are moved into the fluid by this amount.
pub const ZERO_PERTURBATION: f64 = -1e-14;

/// Slack factor on `K` when checking strip reachability.
pub const STRIP_SLACK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidState {
    pub center: Point2<f64>,
    pub radius: f64,
    pub xi: Vector2<f64>,
}

impl RigidState {
    pub fn new(center: Point2<f64>, radius: f64, xi: Vector2<f64>) -> Self {
        Self { center, radius, xi }
    }

    /// Disk of radius 0.1 at rest at (0.5, 0.8).
    pub fn initial() -> Self {
        Self::new(Point2::new(0.5, 0.8), 0.1, Vector2::zeros())
    }

    pub fn level_set(&self, x: &Point2<f64>) -> f64 {
        level_set_value(self, x)
    }

    /// Distance between the disk and the boundary of the unit square.
    pub fn clearance(&self) -> f64 {
        let c = self.center;
        c.x.min(1.0 - c.x).min(c.y).min(1.0 - c.y) - self.radius
    }

    pub fn translated(&self, d: Vector2<f64>) -> Self {
        Self {
            center: self.center + d,
            ..*self
        }
    }
}

/// Signed distance `r - |x - C|`: negative in the fluid, positive inside the disk.
pub fn level_set_value(state: &RigidState, x: &Point2<f64>) -> f64 {
    state.radius - (x - state.center).norm()
}

pub mod flags {
    pub const ACTIVE: u8 = 1;
    pub const CUT: u8 = 2;
    pub const INTERFACE: u8 = 4;
    pub const STRIP_PM: u8 = 8;
    pub const STRIP_PLUS: u8 = 16;
}

/// Diagnostics of the analytic circle against the element edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CrossingStats {
    /// Edges crossed twice by the circle (chord shallower than the mesh resolves).
    pub double_crossed_edges: usize,
    /// Cut elements whose boundary the circle crosses more than twice.
    pub over_crossed_elements: usize,
}

#[derive(Clone, Debug)]
pub struct ActiveDecomposition {
    pub delta_h: f64,
    /// Bit set of [`flags`] per background triangle.
    pub element_flags: Vec<u8>,
    pub active_elements: Vec<usize>,
    pub cut_elements: Vec<usize>,
    pub interface_elements: Vec<usize>,
    pub strip_elements_pm: Vec<usize>,
    pub strip_elements_plus: Vec<usize>,
    pub strip_facets: Vec<usize>,
    /// Level set at the mesh vertices with exact zeros perturbed.
    pub vertex_phi: Vec<f64>,
    pub crossings: CrossingStats,
}

impl ActiveDecomposition {
    pub fn is_active(&self, t: usize) -> bool {
        self.element_flags[t] & flags::ACTIVE != 0
    }

    pub fn is_cut(&self, t: usize) -> bool {
        self.element_flags[t] & flags::CUT != 0
    }

    pub fn is_interface(&self, t: usize) -> bool {
        self.element_flags[t] & flags::INTERFACE != 0
    }

    pub fn element_phi(&self, mesh: &TriMesh, t: usize) -> [f64; 3] {
        let [a, b, c] = mesh.triangles[t];
        [self.vertex_phi[a], self.vertex_phi[b], self.vertex_phi[c]]
    }
}

fn perturbed(phi: f64) -> f64 {
    if phi == 0.0 {
        ZERO_PERTURBATION
    } else {
        phi
    }
}

fn point_segment_distance(p: &Point2<f64>, a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn point_triangle_distance(p: &Point2<f64>, tri: &[Point2<f64>; 3]) -> f64 {
    let side = |a: &Point2<f64>, b: &Point2<f64>| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    let s = [side(&tri[0], &tri[1]), side(&tri[1], &tri[2]), side(&tri[2], &tri[0])];
    if s.iter().all(|&v| v >= 0.0) {
        return 0.0;
    }
    (0..3)
        .map(|i| point_segment_distance(p, &tri[i], &tri[(i + 1) % 3]))
        .fold(f64::INFINITY, f64::min)
}

/// Number of intersections of the circle with the closed segment `a b`.
fn circle_edge_crossings(state: &RigidState, a: &Point2<f64>, b: &Point2<f64>) -> usize {
    let d = b - a;
    let f = a - state.center;
    let qa = d.norm_squared();
    let qb = 2.0 * f.dot(&d);
    let qc = f.norm_squared() - state.radius * state.radius;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return 0;
    }
    let sq = disc.sqrt();
    let roots = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)];
    if disc == 0.0 {
        return usize::from((0.0..=1.0).contains(&roots[0]));
    }
    roots.iter().filter(|t| (0.0..=1.0).contains(*t)).count()
}

/// Classifies every background element for one time step.
pub fn classify(mesh: &TriMesh, state: &RigidState, delta_h: f64) -> Result<ActiveDecomposition> {
    if !(delta_h >= 0.0) || !delta_h.is_finite() {
        return Err(Error::InvalidArgument(format!("strip width {delta_h} must be >= 0")));
    }
    let clearance = state.clearance();
    if !(clearance > 0.0) {
        return Err(Error::BodyLeftDomain { clearance });
    }
    let vertex_phi: Vec<f64> = mesh
        .vertices
        .iter()
        .map(|x| perturbed(level_set_value(state, x)))
        .collect();

    let nt = mesh.n_triangles();
    let mut element_flags = vec![0u8; nt];
    for t in 0..nt {
        let tri = mesh.triangle_points(t);
        let [a, b, c] = mesh.triangles[t];
        let phi = [vertex_phi[a], vertex_phi[b], vertex_phi[c]];
        let phi_min = phi[0].min(phi[1]).min(phi[2]);
        if phi_min > delta_h {
            continue;
        }
        // the level set is concave, so its maximum sits at the point closest to C
        let phi_max = state.radius - point_triangle_distance(&state.center, &tri);
        let mut f = flags::ACTIVE;
        if phi_min < 0.0 {
            f |= flags::CUT;
        }
        if phi.iter().any(|&p| p < 0.0) && phi.iter().any(|&p| p > 0.0) {
            f |= flags::INTERFACE;
        }
        if phi_max >= -delta_h {
            f |= flags::STRIP_PM;
        }
        if phi_max >= 0.0 {
            f |= flags::STRIP_PLUS;
        }
        element_flags[t] = f;
    }

    let crossings = check_resolution(mesh, state, &vertex_phi, &element_flags)?;

    let collect = |bit: u8| -> Vec<usize> { (0..nt).filter(|&t| element_flags[t] & bit != 0).collect() };
    let strip_facets = mesh
        .facets
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let (t1, t2) = (f.triangles.0, f.triangles.1?);
            let (f1, f2) = (element_flags[t1], element_flags[t2]);
            let both_active = f1 & f2 & flags::ACTIVE != 0;
            let any_strip = (f1 | f2) & flags::STRIP_PM != 0;
            (both_active && any_strip).then_some(i)
        })
        .collect();

    Ok(ActiveDecomposition {
        delta_h,
        active_elements: collect(flags::ACTIVE),
        cut_elements: collect(flags::CUT),
        interface_elements: collect(flags::INTERFACE),
        strip_elements_pm: collect(flags::STRIP_PM),
        strip_elements_plus: collect(flags::STRIP_PLUS),
        strip_facets,
        element_flags,
        vertex_phi,
        crossings,
    })
}

/// Verifies that the discrete interface is a single closed loop and that no
/// element boundary is crossed by the circle more than twice.
fn check_resolution(
    mesh: &TriMesh,
    state: &RigidState,
    vertex_phi: &[f64],
    element_flags: &[u8],
) -> Result<CrossingStats> {
    let mut stats = CrossingStats::default();
    let mut edge_crossings = vec![usize::MAX; mesh.n_facets()];
    let mut crossings_of = |f: usize| -> usize {
        if edge_crossings[f] == usize::MAX {
            let [a, b] = mesh.facets[f].vertices;
            edge_crossings[f] = circle_edge_crossings(state, &mesh.vertices[a], &mesh.vertices[b]);
        }
        edge_crossings[f]
    };
    for t in 0..mesh.n_triangles() {
        if element_flags[t] & flags::STRIP_PLUS == 0 || element_flags[t] & flags::CUT == 0 {
            continue;
        }
        let mut total = 0;
        for &f in &mesh.triangle_facets[t] {
            total += crossings_of(f);
        }
        let tri = mesh.triangle_points(t);
        let inside = point_triangle_distance(&state.center, &tri) == 0.0;
        if total == 0 && inside && element_flags[t] & flags::INTERFACE == 0 {
            return Err(Error::GeometryUnderResolved(format!(
                "disk lies inside element {t}"
            )));
        }
        // a vertex on the circle is counted once per incident edge
        let on_circle = mesh.triangles[t]
            .iter()
            .filter(|&&v| (mesh.vertices[v] - state.center).norm() == state.radius)
            .count();
        if total - on_circle.min(total) > 2 {
            stats.over_crossed_elements += 1;
        }
    }
    stats.double_crossed_edges = edge_crossings.iter().filter(|&&c| c == 2).count();

    // walk the piecewise-linear zero set through sign-changing facets
    let sign_change = |f: usize| {
        let [a, b] = mesh.facets[f].vertices;
        (vertex_phi[a] < 0.0) != (vertex_phi[b] < 0.0)
    };
    let interface: Vec<usize> = (0..mesh.n_triangles())
        .filter(|&t| element_flags[t] & flags::INTERFACE != 0)
        .collect();
    if interface.is_empty() {
        return Ok(stats);
    }
    let mut seen = vec![false; mesh.n_triangles()];
    let mut queue = VecDeque::from([interface[0]]);
    seen[interface[0]] = true;
    let mut reached = 0;
    while let Some(t) = queue.pop_front() {
        reached += 1;
        for (f, other) in mesh.neighbours(t) {
            if sign_change(f) && !seen[other] {
                seen[other] = true;
                queue.push_back(other);
            }
        }
    }
    let boundary_cut = mesh
        .facets
        .iter()
        .enumerate()
        .any(|(f, fa)| !fa.is_interior() && sign_change(f));
    if reached != interface.len() || boundary_cut {
        return Err(Error::GeometryUnderResolved(format!(
            "discrete interface is not a single closed curve ({reached} of {} elements connected)",
            interface.len()
        )));
    }
    Ok(stats)
}

/// `K = ceil(1 + delta_h / h_max)`, after checking that every outer strip element
/// reaches an uncut element within `STRIP_SLACK * K` strip-facet crossings.
pub fn strip_crossing_bound(decomp: &ActiveDecomposition, mesh: &TriMesh) -> Result<usize> {
    let k = crossing_constant(decomp.delta_h, mesh.h_max);
    let limit = STRIP_SLACK * k;
    let nt = mesh.n_triangles();
    let mut dist = vec![usize::MAX; nt];
    let mut queue = VecDeque::new();
    for &t in &decomp.cut_elements {
        if decomp.element_flags[t] & flags::STRIP_PLUS == 0 {
            dist[t] = 0;
            queue.push_back(t);
        }
    }
    let mut strip_facet = vec![false; mesh.n_facets()];
    for &f in &decomp.strip_facets {
        strip_facet[f] = true;
    }
    while let Some(t) = queue.pop_front() {
        for (f, other) in mesh.neighbours(t) {
            if strip_facet[f] && dist[other] == usize::MAX {
                dist[other] = dist[t] + 1;
                queue.push_back(other);
            }
        }
    }
    for &t in &decomp.strip_elements_plus {
        let d = dist[t];
        if d > limit {
            return Err(Error::StripDisconnected {
                element: t,
                distance: (d != usize::MAX).then_some(d),
                limit,
            });
        }
    }
    Ok(k)
}

pub fn crossing_constant(delta_h: f64, h_max: f64) -> usize {
    // tolerate round-off when delta_h is an exact multiple of h_max
    let ratio = delta_h / h_max;
    let r = ratio.round();
    let ratio = if (ratio - r).abs() < 1e-12 { r } else { ratio };
    (1.0 + ratio).ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_structured_mesh;

    #[test]
    fn level_set_examples() {
        let s = RigidState::initial();
        assert_eq!(level_set_value(&s, &Point2::new(0.5, 0.8)), 0.1);
        assert!(level_set_value(&s, &Point2::new(0.5, 0.7)).abs() < 1e-15);
        let v = level_set_value(&s, &Point2::new(0.1, 0.1));
        assert!((v - (0.1 - 0.65f64.sqrt())).abs() < 1e-15);
        assert!((v + 0.70623).abs() < 1e-5);
    }

    #[test]
    fn zero_delta_active_equals_cut() {
        let m = build_structured_mesh(0.1).unwrap();
        let d = classify(&m, &RigidState::initial(), 0.0).unwrap();
        assert_eq!(d.active_elements, d.cut_elements);
        assert!(d.cut_elements.len() < m.n_triangles());
    }

    #[test]
    fn huge_delta_activates_everything() {
        let m = build_structured_mesh(0.1).unwrap();
        let d = classify(&m, &RigidState::initial(), 10.0).unwrap();
        assert_eq!(d.active_elements.len(), m.n_triangles());
    }

    #[test]
    fn crossing_constant_examples() {
        assert_eq!(crossing_constant(0.0, 0.1), 1);
        assert_eq!(crossing_constant(0.1, 0.1), 2);
        assert_eq!(crossing_constant(0.035, 0.1), 2);
        let m = build_structured_mesh(0.1).unwrap();
        for (delta, k) in [(0.0, 1), (m.h_max, 2), (0.35 * m.h_max, 2)] {
            let d = classify(&m, &RigidState::initial(), delta).unwrap();
            assert_eq!(strip_crossing_bound(&d, &m).unwrap(), k);
        }
    }

    #[test]
    fn body_touching_boundary_rejected() {
        let m = build_structured_mesh(0.1).unwrap();
        let s = RigidState::new(Point2::new(0.5, 0.95), 0.1, Vector2::zeros());
        assert!(matches!(classify(&m, &s, 0.0), Err(Error::BodyLeftDomain { .. })));
    }

    #[test]
    fn coarse_mesh_is_under_resolved() {
        // the whole disk sits inside a single element of the 2-triangle mesh
        let m = build_structured_mesh(1.0).unwrap();
        let s = RigidState::new(Point2::new(0.7, 0.25), 0.1, Vector2::zeros());
        assert!(matches!(classify(&m, &s, 0.0), Err(Error::GeometryUnderResolved(_))));
    }

    #[test]
    fn normal_points_away_from_center() {
        // n = -grad(phi)/|grad(phi)| = (x - C)/|x - C|
        let s = RigidState::initial();
        for i in 0..16 {
            let th = i as f64 * std::f64::consts::TAU / 16.0;
            let x = s.center + Vector2::new(th.cos(), th.sin()) * s.radius;
            let e = 1e-7;
            let g = Vector2::new(
                (s.level_set(&(x + Vector2::new(e, 0.0))) - s.level_set(&(x - Vector2::new(e, 0.0)))) / (2.0 * e),
                (s.level_set(&(x + Vector2::new(0.0, e))) - s.level_set(&(x - Vector2::new(0.0, e)))) / (2.0 * e),
            );
            assert!((g.norm() - 1.0).abs() < 1e-6);
            let n = -g / g.norm();
            assert!((n - (x - s.center) / s.radius).norm() < 1e-6);
        }
    }
}
