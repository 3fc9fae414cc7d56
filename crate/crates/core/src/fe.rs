//! Equispaced Lagrange elements of arbitrary degree on triangles.
//!
//! Shape functions are evaluated through barycentric coordinates, so evaluating
//! them at points outside the element yields the canonical polynomial extension
//! used by the ghost penalty.

use nalgebra::{Point2, Vector2};

use crate::error::{Error, Result};

/// Affine geometry of one triangle.
#[derive(Clone, Copy, Debug)]
pub struct TriGeom {
    pub points: [Point2<f64>; 3],
    pub area: f64,
    /// Gradients of the barycentric coordinates (constant on the element).
    pub grad_bary: [Vector2<f64>; 3],
}

impl TriGeom {
    pub fn new(points: [Point2<f64>; 3]) -> Result<Self> {
        let [p0, p1, p2] = points;
        let det = (p1.x - p0.x) * (p2.y - p0.y) - (p2.x - p0.x) * (p1.y - p0.y);
        let scale = (p1 - p0).norm_squared().max((p2 - p0).norm_squared());
        if !(det.abs() > 1e-14 * scale) {
            return Err(Error::DegenerateTriangle(0.5 * det));
        }
        let inv = 1.0 / det;
        let grad_bary = [
            Vector2::new(p1.y - p2.y, p2.x - p1.x) * inv,
            Vector2::new(p2.y - p0.y, p0.x - p2.x) * inv,
            Vector2::new(p0.y - p1.y, p1.x - p0.x) * inv,
        ];
        Ok(Self {
            points,
            area: 0.5 * det.abs(),
            grad_bary,
        })
    }

    /// Barycentric coordinates of `x`; entries may be negative outside the triangle.
    pub fn barycentric(&self, x: &Point2<f64>) -> [f64; 3] {
        let d = x - self.points[0];
        let l1 = self.grad_bary[1].dot(&d);
        let l2 = self.grad_bary[2].dot(&d);
        [1.0 - l1 - l2, l1, l2]
    }

    pub fn diameter(&self) -> f64 {
        let [a, b, c] = self.points;
        (a - b).norm().max((b - c).norm()).max((c - a).norm())
    }
}

/// Reference description of the P^k Lagrange element.
#[derive(Clone, Debug)]
pub struct LagrangeElement {
    pub degree: usize,
    /// Barycentric multi-indices: vertices, then edge nodes (edge `e` runs from
    /// vertex `e` to vertex `(e + 1) % 3`), then interior nodes.
    pub nodes: Vec<[usize; 3]>,
}

impl LagrangeElement {
    pub fn new(degree: usize) -> Self {
        assert!((1..=7).contains(&degree), "Lagrange degree must be in 1..=7");
        let k = degree;
        let mut nodes = vec![[k, 0, 0], [0, k, 0], [0, 0, k]];
        for e in 0..3 {
            let (a, b) = (e, (e + 1) % 3);
            for m in 1..k {
                let mut idx = [0; 3];
                idx[a] = k - m;
                idx[b] = m;
                nodes.push(idx);
            }
        }
        for i in 1..k {
            for j in 1..k - i {
                let l = k - i - j;
                if l >= 1 {
                    nodes.push([l, i, j]);
                }
            }
        }
        debug_assert_eq!(nodes.len(), (k + 1) * (k + 2) / 2);
        Self { degree, nodes }
    }

    pub fn n_local(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_interior(&self) -> usize {
        let k = self.degree;
        if k < 3 {
            0
        } else {
            (k - 1) * (k - 2) / 2
        }
    }

    /// Node position for barycentric multi-index `node` on `geom`.
    pub fn node_point(&self, geom: &TriGeom, node: usize) -> Point2<f64> {
        let k = self.degree as f64;
        let idx = self.nodes[node];
        let mut p = Vector2::zeros();
        for i in 0..3 {
            p += geom.points[i].coords * (idx[i] as f64 / k);
        }
        Point2::from(p)
    }

    /// 1D factors `P_a(l) = prod_{m<a} (k l - m)/(m + 1)` and their derivatives for a <= k.
    fn factors(&self, l: f64, vals: &mut [f64], ders: &mut [f64]) {
        let k = self.degree as f64;
        vals[0] = 1.0;
        ders[0] = 0.0;
        for a in 1..=self.degree {
            let f = (k * l - (a - 1) as f64) / a as f64;
            vals[a] = vals[a - 1] * f;
            ders[a] = ders[a - 1] * f + vals[a - 1] * k / a as f64;
        }
    }

    /// Shape function values at barycentric coordinates `bary`.
    pub fn eval(&self, bary: [f64; 3], out: &mut [f64]) {
        let mut vals = [[0.0; 8]; 3];
        let mut ders = [[0.0; 8]; 3];
        for i in 0..3 {
            self.factors(bary[i], &mut vals[i], &mut ders[i]);
        }
        for (o, idx) in out.iter_mut().zip(&self.nodes) {
            *o = vals[0][idx[0]] * vals[1][idx[1]] * vals[2][idx[2]];
        }
    }

    /// Shape function values and derivatives with respect to the three
    /// barycentric coordinates.
    pub fn eval_bary_derivs(&self, bary: [f64; 3], values: &mut [f64], dbary: &mut [[f64; 3]]) {
        let mut vals = [[0.0; 8]; 3];
        let mut ders = [[0.0; 8]; 3];
        for i in 0..3 {
            self.factors(bary[i], &mut vals[i], &mut ders[i]);
        }
        for ((v, d), idx) in values.iter_mut().zip(dbary.iter_mut()).zip(&self.nodes) {
            let (a0, a1, a2) = (vals[0][idx[0]], vals[1][idx[1]], vals[2][idx[2]]);
            *v = a0 * a1 * a2;
            *d = [
                ders[0][idx[0]] * a1 * a2,
                a0 * ders[1][idx[1]] * a2,
                a0 * a1 * ders[2][idx[2]],
            ];
        }
    }

    /// Shape function values and physical gradients.
    pub fn eval_with_grad(
        &self,
        geom: &TriGeom,
        bary: [f64; 3],
        values: &mut [f64],
        grads: &mut [Vector2<f64>],
    ) {
        let mut d = [[0.0; 3]; 36];
        let n = self.n_local();
        assert!(n <= d.len(), "degree too high");
        self.eval_bary_derivs(bary, values, &mut d[..n]);
        for (g, d) in grads.iter_mut().zip(&d[..n]) {
            *g = geom.grad_bary[0] * d[0] + geom.grad_bary[1] * d[1] + geom.grad_bary[2] * d[2];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> TriGeom {
        TriGeom::new([
            Point2::new(0.1, 0.2),
            Point2::new(0.7, 0.25),
            Point2::new(0.3, 0.9),
        ])
        .unwrap()
    }

    #[test]
    fn nodal_basis_is_kronecker() {
        let g = geom();
        for k in 1..=5 {
            let el = LagrangeElement::new(k);
            let mut vals = vec![0.0; el.n_local()];
            for n in 0..el.n_local() {
                let x = el.node_point(&g, n);
                el.eval(g.barycentric(&x), &mut vals);
                for (m, v) in vals.iter().enumerate() {
                    let expect = if m == n { 1.0 } else { 0.0 };
                    assert!((v - expect).abs() < 1e-12, "k={k} n={n} m={m} v={v}");
                }
            }
        }
    }

    #[test]
    fn reproduces_polynomials_inside_and_outside() {
        let g = geom();
        let poly = |p: &Point2<f64>| 1.0 + 2.0 * p.x - p.y + 0.5 * p.x * p.y - 3.0 * p.y * p.y;
        let grad = |p: &Point2<f64>| Vector2::new(2.0 + 0.5 * p.y, -1.0 + 0.5 * p.x - 6.0 * p.y);
        for k in 2..=4 {
            let el = LagrangeElement::new(k);
            let coeffs: Vec<f64> = (0..el.n_local()).map(|n| poly(&el.node_point(&g, n))).collect();
            let mut vals = vec![0.0; el.n_local()];
            let mut grads = vec![Vector2::zeros(); el.n_local()];
            for x in [Point2::new(0.3, 0.4), Point2::new(-0.5, 1.3), Point2::new(2.0, -1.0)] {
                el.eval_with_grad(&g, g.barycentric(&x), &mut vals, &mut grads);
                let v: f64 = vals.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
                let gr: Vector2<f64> = grads.iter().zip(&coeffs).map(|(a, b)| a * *b).sum();
                assert!((v - poly(&x)).abs() < 1e-11);
                assert!((gr - grad(&x)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn partition_of_unity() {
        let el = LagrangeElement::new(3);
        let mut vals = vec![0.0; el.n_local()];
        el.eval([0.2, 0.5, 0.3], &mut vals);
        assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn degenerate_rejected() {
        let r = TriGeom::new([Point2::new(0.0, 0.0), Point2::new(1.0, 1.0), Point2::new(2.0, 2.0)]);
        assert!(matches!(r, Err(Error::DegenerateTriangle(_))));
    }
}
