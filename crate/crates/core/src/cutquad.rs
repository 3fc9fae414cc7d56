//! Quadrature on the fluid part of cut triangles and on the discrete interface,
//! both taken from the piecewise-linear interpolant of the level set.

use nalgebra::{Point2, Vector2};

use crate::error::{Error, Result};
use crate::geometry::ZERO_PERTURBATION;
use crate::mesh::signed_area;
use crate::quadrature::{line_rule, TriangleRule};

#[derive(Clone, Debug, Default)]
pub struct CutRule {
    pub volume_points: Vec<Point2<f64>>,
    pub volume_weights: Vec<f64>,
    pub interface_points: Vec<Point2<f64>>,
    pub interface_weights: Vec<f64>,
    /// `-grad(phi_lin)/|grad(phi_lin)|`; `None` when the element is not cut.
    pub normal: Option<Vector2<f64>>,
    /// Area of the fluid part divided by the element area.
    pub inside_fraction: f64,
    /// End points of the interface segment, if any.
    pub segment: Option<[Point2<f64>; 2]>,
}

impl CutRule {
    pub fn volume(&self) -> f64 {
        self.volume_weights.iter().sum()
    }

    pub fn interface_length(&self) -> f64 {
        self.interface_weights.iter().sum()
    }
}

/// Reusable reference rules for one quadrature order.
#[derive(Clone, Debug)]
pub struct CutQuadrature {
    pub order: usize,
    tri: TriangleRule,
    line: (Vec<f64>, Vec<f64>),
}

impl CutQuadrature {
    pub fn new(order: usize) -> Self {
        Self {
            order,
            tri: TriangleRule::new(order),
            line: line_rule(order),
        }
    }

    pub fn triangle_rule(&self) -> &TriangleRule {
        &self.tri
    }

    /// Rule for the whole triangle, ignoring the level set.
    pub fn full(&self, coords: &[Point2<f64>; 3]) -> (Vec<Point2<f64>>, Vec<f64>) {
        self.tri.map(&coords[0], &coords[1], &coords[2])
    }

    pub fn cut(&self, coords: &[Point2<f64>; 3], phi: &[f64; 3]) -> Result<CutRule> {
        let area = signed_area(&coords[0], &coords[1], &coords[2]);
        let scale = (coords[1] - coords[0])
            .norm_squared()
            .max((coords[2] - coords[0]).norm_squared());
        if !(area.abs() > 1e-14 * scale) {
            return Err(Error::DegenerateTriangle(area));
        }
        if phi.iter().all(|&p| p == 0.0) {
            return Err(Error::InvalidArgument(
                "level set vanishes identically on the element".into(),
            ));
        }
        let phi = phi.map(|p| if p == 0.0 { ZERO_PERTURBATION } else { p });
        let inside: Vec<bool> = phi.iter().map(|&p| p < 0.0).collect();
        let n_in = inside.iter().filter(|&&b| b).count();
        let mut rule = CutRule::default();
        match n_in {
            0 => return Ok(rule),
            3 => {
                let (p, w) = self.full(coords);
                rule.volume_points = p;
                rule.volume_weights = w;
                rule.inside_fraction = 1.0;
                return Ok(rule);
            }
            _ => {}
        }
        // the vertex whose sign differs from the other two
        let lone = (0..3)
            .find(|&i| inside[i] != inside[(i + 1) % 3] && inside[i] != inside[(i + 2) % 3])
            .expect("mixed signs have a lone vertex");
        let (j, k) = ((lone + 1) % 3, (lone + 2) % 3);
        let cross = |a: usize, b: usize| {
            let t = phi[a] / (phi[a] - phi[b]);
            coords[a] + (coords[b] - coords[a]) * t
        };
        let pj = cross(lone, j);
        let pk = cross(lone, k);
        let mut push = |a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>| {
            let (p, w) = self.tri.map(a, b, c);
            rule.volume_points.extend(p);
            rule.volume_weights.extend(w);
        };
        if inside[lone] {
            push(&coords[lone], &pj, &pk);
        } else {
            push(&pj, &coords[j], &coords[k]);
            push(&pj, &coords[k], &pk);
        }
        let len = (pk - pj).norm();
        let (s, w) = &self.line;
        for (si, wi) in s.iter().zip(w) {
            rule.interface_points.push(pj + (pk - pj) * *si);
            rule.interface_weights.push(wi * len);
        }
        rule.inside_fraction = rule.volume() / area.abs();
        rule.normal = Some(normal_from(coords, &phi));
        rule.segment = Some([pj, pk]);
        Ok(rule)
    }
}

fn grad_linear(coords: &[Point2<f64>; 3], phi: &[f64; 3]) -> Vector2<f64> {
    let [p0, p1, p2] = *coords;
    let det = (p1.x - p0.x) * (p2.y - p0.y) - (p2.x - p0.x) * (p1.y - p0.y);
    let (d1, d2) = (phi[1] - phi[0], phi[2] - phi[0]);
    Vector2::new(
        (d1 * (p2.y - p0.y) - d2 * (p1.y - p0.y)) / det,
        (d2 * (p1.x - p0.x) - d1 * (p2.x - p0.x)) / det,
    )
}

fn normal_from(coords: &[Point2<f64>; 3], phi: &[f64; 3]) -> Vector2<f64> {
    let g = grad_linear(coords, phi);
    -g / g.norm()
}

/// Cut rule exact for polynomials of degree `order` on both sub-domains.
pub fn cut_triangle(coords: &[Point2<f64>; 3], phi: &[f64; 3], order: usize) -> Result<CutRule> {
    if order == 0 {
        return Err(Error::InvalidArgument("quadrature order must be >= 1".into()));
    }
    CutQuadrature::new(order).cut(coords, phi)
}

/// `-grad(phi_lin)/|grad(phi_lin)|` on an element where the level set changes sign.
pub fn interface_normal(coords: &[Point2<f64>; 3], phi: &[f64; 3]) -> Result<Vector2<f64>> {
    let phi = phi.map(|p| if p == 0.0 { ZERO_PERTURBATION } else { p });
    let neg = phi.iter().any(|&p| p < 0.0);
    let pos = phi.iter().any(|&p| p > 0.0);
    if !(neg && pos) {
        return Err(Error::NoSignChange);
    }
    let area = signed_area(&coords[0], &coords[1], &coords[2]);
    if area == 0.0 {
        return Err(Error::DegenerateTriangle(area));
    }
    Ok(normal_from(coords, &phi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn unit() -> [Point2<f64>; 3] {
        [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0)]
    }

    #[test]
    fn uncut_and_exterior() {
        let r = cut_triangle(&unit(), &[-1.0, -1.0, -1.0], 2).unwrap();
        assert_eq!(r.inside_fraction, 1.0);
        assert!((r.volume() - 0.5).abs() < 1e-15);
        assert!(r.interface_points.is_empty());
        let r = cut_triangle(&unit(), &[1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(r.inside_fraction, 0.0);
        assert!(r.volume_points.is_empty() && r.interface_points.is_empty());
    }

    #[test]
    fn one_vertex_outside() {
        let r = cut_triangle(&unit(), &[-1.0, -1.0, 1.0], 4).unwrap();
        assert!((r.volume() - 0.375).abs() < 1e-15);
        assert!((r.interface_length() - 0.5).abs() < 1e-15);
        let [a, b] = r.segment.unwrap();
        let mut ends = [a, b];
        ends.sort_by(|p, q| p.x.partial_cmp(&q.x).unwrap());
        assert!((ends[0] - Point2::new(0.0, 0.5)).norm() < 1e-15);
        assert!((ends[1] - Point2::new(0.5, 0.5)).norm() < 1e-15);
        assert!((r.normal.unwrap() - Vector2::new(0.0, -1.0)).norm() < 1e-15);
    }

    #[test]
    fn monte_carlo_area() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let phi = [-0.3, 0.8, -0.1];
        let r = cut_triangle(&unit(), &phi, 2).unwrap();
        let n = 1_000_000;
        let mut hits = 0usize;
        let mut total = 0usize;
        while total < n {
            let (s, t): (f64, f64) = (rng.gen(), rng.gen());
            if s + t > 1.0 {
                continue;
            }
            total += 1;
            if phi[0] * (1.0 - s - t) + phi[1] * s + phi[2] * t < 0.0 {
                hits += 1;
            }
        }
        let mc = 0.5 * hits as f64 / n as f64;
        assert!((r.volume() - mc).abs() < 2e-3, "{} vs {mc}", r.volume());
    }

    #[test]
    fn normal_examples() {
        let n = interface_normal(&unit(), &[-1.0, -1.0, 1.0]).unwrap();
        assert!((n - Vector2::new(0.0, -1.0)).norm() < 1e-15);
        let n = interface_normal(&unit(), &[-1.0, 1.0, -1.0]).unwrap();
        assert!((n - Vector2::new(-1.0, 0.0)).norm() < 1e-15);
        let n3 = interface_normal(&unit(), &[-3.0, 3.0, -3.0]).unwrap();
        assert!((n3 - n).norm() < 1e-15);
        assert!(matches!(
            interface_normal(&unit(), &[1.0, 2.0, 3.0]),
            Err(Error::NoSignChange)
        ));
    }

    #[test]
    fn degenerate_and_zero() {
        let flat = [Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(2.0, 0.0)];
        assert!(matches!(
            cut_triangle(&flat, &[-1.0, 1.0, 1.0], 2),
            Err(Error::DegenerateTriangle(_))
        ));
        assert!(cut_triangle(&unit(), &[0.0, 0.0, 0.0], 2).is_err());
        // a single zero vertex counts as fluid
        let r = cut_triangle(&unit(), &[0.0, 1.0, 1.0], 2).unwrap();
        assert!(r.volume() < 1e-12);
    }

    /// Sutherland–Hodgman clip of a triangle to `{phi_lin < 0}`.
    fn clip(coords: &[Point2<f64>; 3], phi: &[f64; 3]) -> Vec<Point2<f64>> {
        let mut out = Vec::new();
        for i in 0..3 {
            let j = (i + 1) % 3;
            let (a, b) = (coords[i], coords[j]);
            let (fa, fb) = (phi[i], phi[j]);
            if fa < 0.0 {
                out.push(a);
            }
            if (fa < 0.0) != (fb < 0.0) {
                let t = fa / (fa - fb);
                out.push(a + (b - a) * t);
            }
        }
        out
    }

    /// Monomial moment over a polygon through Green's theorem,
    /// `int x^a y^b = 1/(a+1) * oint x^(a+1) y^b dy`.
    fn polygon_moment(poly: &[Point2<f64>], a: i32, b: i32) -> f64 {
        let (s, w) = crate::quadrature::gauss_legendre_unit(12);
        let mut sum = 0.0;
        for i in 0..poly.len() {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            for (si, wi) in s.iter().zip(&w) {
                let x = p + (q - p) * *si;
                sum += wi * x.x.powi(a + 1) * x.y.powi(b) * (q.y - p.y);
            }
        }
        sum / (a + 1) as f64
    }

    proptest! {
        #[test]
        fn moments_match_clipped_polygon(
            phi in prop::array::uniform3(-1.0f64..1.0),
            pts in prop::array::uniform6(-1.0f64..1.0),
            order in 1usize..7,
        ) {
            let coords = [
                Point2::new(pts[0], pts[1]),
                Point2::new(pts[2], pts[3]),
                Point2::new(pts[4], pts[5]),
            ];
            let area = signed_area(&coords[0], &coords[1], &coords[2]);
            prop_assume!(area.abs() > 1e-3);
            prop_assume!(phi.iter().all(|p| p.abs() > 1e-6));
            let coords = if area < 0.0 { [coords[0], coords[2], coords[1]] } else { coords };
            let phi = if area < 0.0 { [phi[0], phi[2], phi[1]] } else { phi };
            let r = cut_triangle(&coords, &phi, order).unwrap();
            prop_assert!(r.volume_weights.iter().all(|&w| w >= 0.0));
            prop_assert!(r.interface_weights.iter().all(|&w| w >= 0.0));
            let poly = clip(&coords, &phi);
            for a in 0..=order as i32 {
                for b in 0..=(order as i32 - a) {
                    let q: f64 = r.volume_points.iter().zip(&r.volume_weights)
                        .map(|(p, w)| w * p.x.powi(a) * p.y.powi(b)).sum();
                    let exact = if poly.len() < 3 { 0.0 } else { polygon_moment(&poly, a, b) };
                    prop_assert!((q - exact).abs() < 1e-12, "a={} b={} q={} exact={}", a, b, q, exact);
                }
            }
            if let Some(n) = r.normal {
                prop_assert!((n.norm() - 1.0).abs() < 1e-14);
            }
        }

        #[test]
        fn relabeling_invariance(phi in prop::array::uniform3(-1.0f64..1.0), shift in 0usize..3) {
            prop_assume!(phi.iter().all(|p| p.abs() > 1e-6));
            let c = [Point2::new(0.1, 0.0), Point2::new(0.9, 0.2), Point2::new(0.3, 0.7)];
            let r0 = cut_triangle(&c, &phi, 4).unwrap();
            let cs = [c[shift], c[(shift + 1) % 3], c[(shift + 2) % 3]];
            let ps = [phi[shift], phi[(shift + 1) % 3], phi[(shift + 2) % 3]];
            let r1 = cut_triangle(&cs, &ps, 4).unwrap();
            prop_assert!((r0.volume() - r1.volume()).abs() < 1e-13);
            prop_assert!((r0.interface_length() - r1.interface_length()).abs() < 1e-13);
            // reversed orientation
            let rr = cut_triangle(&[c[0], c[2], c[1]], &[phi[0], phi[2], phi[1]], 4).unwrap();
            prop_assert!((r0.volume() - rr.volume()).abs() < 1e-13);
        }
    }
}
