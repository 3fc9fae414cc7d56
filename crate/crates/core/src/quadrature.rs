//! Gauss rules on the unit interval and on triangles.

use nalgebra::Point2;

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Newton on P_n starting from the Chebyshev-like guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1, 1] -> [0, 1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// A rule on the reference triangle `{(s, t): s, t >= 0, s + t <= 1}`; weights sum to 1/2.
#[derive(Clone, Debug)]
pub struct TriangleRule {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl TriangleRule {
    /// Collapsed (Duffy) tensor Gauss rule, exact for polynomials of total degree `degree`.
    pub fn new(degree: usize) -> Self {
        let n = degree / 2 + 1;
        let (x, wx) = gauss_legendre_unit(n + 1);
        let (y, wy) = gauss_legendre_unit(n);
        let mut points = Vec::with_capacity(x.len() * y.len());
        let mut weights = Vec::with_capacity(points.capacity());
        for (xi, wi) in x.iter().zip(&wx) {
            for (yj, wj) in y.iter().zip(&wy) {
                points.push([*xi, (1.0 - xi) * yj]);
                weights.push(wi * wj * (1.0 - xi));
            }
        }
        Self { points, weights }
    }

    /// Pushes the rule forward to the physical triangle `(a, b, c)`.
    pub fn map(&self, a: &Point2<f64>, b: &Point2<f64>, c: &Point2<f64>) -> (Vec<Point2<f64>>, Vec<f64>) {
        let jac = ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs();
        let pts = self
            .points
            .iter()
            .map(|&[s, t]| a + (b - a) * s + (c - a) * t)
            .collect();
        let w = self.weights.iter().map(|w| w * jac).collect();
        (pts, w)
    }
}

/// Gauss rule on `[0, 1]` exact for degree `degree`.
pub fn line_rule(degree: usize) -> (Vec<f64>, Vec<f64>) {
    gauss_legendre_unit(degree / 2 + 1)
}
