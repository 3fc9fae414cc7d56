//! Direct factorisation of the symmetric indefinite block systems.
//!
//! Symmetric matrices go through a supernodal Bunch–Kaufman `L B L^T`
//! factorisation with an AMD ordering; the symbolic analysis can be reused while
//! the sparsity pattern is unchanged. Unsymmetric matrices, and symmetric ones
//! whose `L B L^T` solve fails the residual check, fall back to sparse LU with
//! partial pivoting.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::solvers::{Solve, SolveCore};
use faer::perm::PermRef;
use faer::sparse::linalg::cholesky::{
    factorize_symbolic_cholesky, CholeskySymbolicParams, IntranodeLbltRef, SymbolicCholesky,
    SymmetricOrdering,
};
use faer::sparse::linalg::SupernodalThreshold;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::SparseColMatRef;
use faer::{Conj, Mat, Par, Side};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Relative residual every accepted solve must meet.
pub const RESIDUAL_TOLERANCE: f64 = 1e-10;

enum Factor {
    Lblt {
        symbolic: Arc<SymbolicCholesky<usize>>,
        values: Vec<f64>,
        subdiag: Vec<f64>,
        perm_fwd: Vec<usize>,
        perm_inv: Vec<usize>,
    },
    Lu(Lu<usize, f64>),
}

pub struct FactoredSystem {
    pub n: usize,
    factor: Factor,
    matrix: SparseMatrix,
    /// Stored entries of the factor.
    pub fill: usize,
    pub pivoting: &'static str,
}

/// Symbolic analysis kept across factorisations with an identical pattern.
#[derive(Default)]
pub struct SymbolicCache {
    pattern: Option<(Vec<usize>, Vec<usize>)>,
    symbolic: Option<Arc<SymbolicCholesky<usize>>>,
}

impl SymbolicCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get(&mut self, a: &SparseMatrix, faer_a: SparseColMatRef<'_, usize, f64>) -> Result<Arc<SymbolicCholesky<usize>>> {
        if let (Some((ip, ix)), Some(sym)) = (&self.pattern, &self.symbolic) {
            if *ip == a.indptr && *ix == a.indices {
                return Ok(sym.clone());
            }
        }
        let sym = factorize_symbolic_cholesky(
            faer_a.symbolic(),
            Side::Lower,
            SymmetricOrdering::Amd,
            CholeskySymbolicParams {
                supernodal_flop_ratio_threshold: SupernodalThreshold::FORCE_SUPERNODAL,
                ..Default::default()
            },
        )
        .map_err(|e| Error::Singular(format!("symbolic analysis failed: {e:?}")))?;
        let sym = Arc::new(sym);
        self.pattern = Some((a.indptr.clone(), a.indices.clone()));
        self.symbolic = Some(sym.clone());
        Ok(sym)
    }
}

pub fn factor(a: &SparseMatrix) -> Result<FactoredSystem> {
    factor_cached(a, &mut SymbolicCache::new())
}

pub fn factor_cached(a: &SparseMatrix, cache: &mut SymbolicCache) -> Result<FactoredSystem> {
    if a.nrows != a.ncols {
        return Err(Error::InvalidArgument(format!("matrix is {}x{}", a.nrows, a.ncols)));
    }
    if a.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite matrix entry".into()));
    }
    let n = a.nrows;
    if a.is_symmetric() {
        // the CSR arrays of a symmetric matrix are also its CSC arrays
        let faer_a = a.transposed_view();
        let sym = cache.get(a, faer_a)?;
        let mut values = vec![0.0; sym.len_val()];
        let mut subdiag = vec![0.0; n];
        let mut perm_fwd = vec![0usize; n];
        let mut perm_inv = vec![0usize; n];
        {
            let mut buf = MemBuffer::new(sym.factorize_numeric_intranode_lblt_scratch::<f64>(Par::Seq, Default::default()));
            sym.factorize_numeric_intranode_lblt(
                &mut values,
                &mut subdiag,
                &mut perm_fwd,
                &mut perm_inv,
                faer_a,
                Side::Lower,
                Par::Seq,
                MemStack::new(&mut buf),
                Default::default(),
            );
        }
        let fill = values.len();
        let fs = FactoredSystem {
            n,
            factor: Factor::Lblt {
                symbolic: sym,
                values,
                subdiag,
                perm_fwd,
                perm_inv,
            },
            matrix: a.clone(),
            fill,
            pivoting: "lblt",
        };
        if fs.probe_ok() {
            return Ok(fs);
        }
        log::debug!("L B L^T probe failed, falling back to LU");
    }
    let lu = a
        .to_faer()
        .sp_lu()
        .map_err(|e| Error::Singular(format!("LU failed: {e:?}")))?;
    let fs = FactoredSystem {
        n,
        factor: Factor::Lu(lu),
        matrix: a.clone(),
        fill: 0,
        pivoting: "lu",
    };
    if !fs.probe_ok() {
        return Err(Error::Singular("factorisation does not reproduce a probe right-hand side".into()));
    }
    Ok(fs)
}

impl FactoredSystem {
    /// Solves with a deterministic probe right-hand side to detect breakdown.
    fn probe_ok(&self) -> bool {
        let b: Vec<f64> = (0..self.n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
        let mut x = Mat::from_fn(self.n, 1, |i, _| b[i]);
        self.raw_solve(&mut x, false);
        let x: Vec<f64> = (0..self.n).map(|i| x[(i, 0)]).collect();
        if x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        relative_residual(&self.matrix, &x, &b) <= 1e-8
    }

    fn raw_solve(&self, rhs: &mut Mat<f64>, transpose: bool) {
        match &self.factor {
            Factor::Lblt {
                symbolic,
                values,
                subdiag,
                perm_fwd,
                perm_inv,
            } => {
                let perm = PermRef::new_checked(perm_fwd, perm_inv, self.n);
                let f = IntranodeLbltRef::new(symbolic, values, subdiag, perm);
                let mut buf = MemBuffer::new(symbolic.solve_in_place_scratch::<f64>(rhs.ncols(), Par::Seq));
                f.solve_in_place_with_conj(Conj::No, rhs.as_mut(), Par::Seq, MemStack::new(&mut buf));
            }
            Factor::Lu(lu) => {
                if transpose {
                    lu.solve_transpose_in_place_with_conj(Conj::No, rhs.as_mut());
                } else {
                    lu.solve_in_place(rhs.as_mut());
                }
            }
        }
    }

    /// Solves for several right-hand sides with up to two steps of iterative
    /// refinement; fails if any relative residual stays above the tolerance.
    pub fn solve_many(&self, rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let m = rhs.len();
        let mut x = Mat::from_fn(self.n, m, |i, j| rhs[j][i]);
        self.raw_solve(&mut x, false);
        let mut sol: Vec<Vec<f64>> = (0..m).map(|j| (0..self.n).map(|i| x[(i, j)]).collect()).collect();
        for _ in 0..2 {
            let res: Vec<f64> = sol
                .iter()
                .zip(rhs)
                .map(|(s, b)| relative_residual(&self.matrix, s, b))
                .collect();
            if res.iter().all(|r| *r <= RESIDUAL_TOLERANCE * 1e-2) {
                break;
            }
            let mut r = Mat::from_fn(self.n, m, |_, _| 0.0);
            for j in 0..m {
                let ax = self.matrix.matvec(&sol[j]);
                for i in 0..self.n {
                    r[(i, j)] = rhs[j][i] - ax[i];
                }
            }
            self.raw_solve(&mut r, false);
            for j in 0..m {
                for i in 0..self.n {
                    sol[j][i] += r[(i, j)];
                }
            }
        }
        for (s, b) in sol.iter().zip(rhs) {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular("non-finite solution".into()));
            }
            let residual = relative_residual(&self.matrix, s, b);
            if residual > RESIDUAL_TOLERANCE {
                return Err(Error::SolveResidual {
                    residual,
                    tolerance: RESIDUAL_TOLERANCE,
                });
            }
        }
        Ok(sol)
    }

    /// Applies the factorisation without refinement or residual checks, for use
    /// as a preconditioner of a nearby matrix.
    pub fn apply_inverse(&self, rhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let m = rhs.len();
        let mut x = Mat::from_fn(self.n, m, |i, j| rhs[j][i]);
        self.raw_solve(&mut x, false);
        (0..m).map(|j| (0..self.n).map(|i| x[(i, j)]).collect()).collect()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        Ok(self.solve_many(&[b.to_vec()])?.pop().unwrap())
    }

    fn solve_transpose_raw(&self, b: &[f64]) -> Vec<f64> {
        let mut x = Mat::from_fn(self.n, 1, |i, _| b[i]);
        // L B L^T is only used for exactly symmetric matrices
        self.raw_solve(&mut x, true);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    fn solve_raw(&self, b: &[f64]) -> Vec<f64> {
        let mut x = Mat::from_fn(self.n, 1, |i, _| b[i]);
        self.raw_solve(&mut x, false);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }
}

/// `||A x - b|| / ||b||` (absolute residual when `b = 0`).
pub fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x);
    let r: f64 = ax.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nb > 0.0 {
        r / nb
    } else {
        r
    }
}

/// Hager–Higham estimate of the 1-norm condition number.
pub fn condition_estimate(a: &SparseMatrix) -> Result<f64> {
    let f = factor(a)?;
    condition_estimate_factored(&f)
}

pub fn condition_estimate_factored(f: &FactoredSystem) -> Result<f64> {
    let n = f.n;
    if n == 0 {
        return Ok(0.0);
    }
    let norm1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
    let mut x = vec![1.0 / n as f64; n];
    let mut est = 0.0;
    let mut last_j = usize::MAX;
    for _ in 0..6 {
        let y = f.solve_raw(&x);
        let ny = norm1(&y);
        if !ny.is_finite() {
            return Err(Error::Singular("non-finite solve in condition estimate".into()));
        }
        if ny <= est {
            break;
        }
        est = ny;
        let sgn: Vec<f64> = y.iter().map(|v| if *v >= 0.0 { 1.0 } else { -1.0 }).collect();
        let z = f.solve_transpose_raw(&sgn);
        let (j, zmax) = z
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bj, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bj, bv) });
        let ztx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
        if zmax <= ztx || j == last_j {
            break;
        }
        last_j = j;
        x = vec![0.0; n];
        x[j] = 1.0;
    }
    // Higham's alternating test vector guards against the classic failure cases
    let alt: Vec<f64> = (0..n)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            s * (1.0 + i as f64 / (n.max(2) - 1) as f64)
        })
        .collect();
    let y = f.solve_raw(&alt);
    let alt_est = 2.0 * norm1(&y) / (3.0 * n as f64);
    let inv_norm = est.max(alt_est);
    Ok(f.matrix.norm_1() * inv_norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identity_and_permutation() {
        let i = SparseMatrix::identity(2);
        let f = factor(&i).unwrap();
        assert_eq!(f.solve(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert!((condition_estimate(&i).unwrap() - 1.0).abs() < 1e-14);
        let p = SparseMatrix::from_dense(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let x = factor(&p).unwrap().solve(&[1.0, 0.0]).unwrap();
        assert!((x[0] - 0.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn diagonal_condition() {
        let d = SparseMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 1e-6]]);
        let c = condition_estimate(&d).unwrap();
        assert!(c > 1e5 && c < 1e7, "{c}");
    }

    #[test]
    fn singular_detected() {
        let s = SparseMatrix::from_dense(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(matches!(factor(&s).and_then(|f| f.solve(&[1.0, 0.0])), Err(Error::Singular(_)) | Err(Error::SolveResidual { .. })));
    }

    fn random_saddle(n: usize, m: usize, seed: u64) -> SparseMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut d = vec![vec![0.0; n + m]; n + m];
        for i in 0..n {
            d[i][i] = 4.0 + rng.gen::<f64>();
            if i + 1 < n {
                let v = -1.0 + 0.1 * rng.gen::<f64>();
                d[i][i + 1] = v;
                d[i + 1][i] = v;
            }
        }
        for j in 0..m {
            for _ in 0..3 {
                let i = rng.gen_range(0..n);
                let v = rng.gen_range(-1.0..1.0);
                d[n + j][i] += v;
                d[i][n + j] += v;
            }
            d[n + j][n + j] = -1e-3;
        }
        SparseMatrix::from_dense(&d)
    }

    #[test]
    fn saddle_solve_and_condition_vs_dense() {
        let a = random_saddle(170, 30, 11);
        let f = factor(&a).unwrap();
        assert_eq!(f.pivoting, "lblt");
        let b: Vec<f64> = (0..200).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&b).unwrap();
        assert!(relative_residual(&a, &x, &b) <= 1e-12);
        let dense = DMatrix::from_fn(200, 200, |i, j| a.get(i, j));
        let inv = dense.clone().try_inverse().unwrap();
        let n1 = |m: &DMatrix<f64>| (0..m.ncols()).map(|j| m.column(j).abs().sum()).fold(0.0, f64::max);
        let exact = n1(&dense) * n1(&inv);
        let est = condition_estimate(&a).unwrap();
        assert!(est <= exact * 1.0000001 && est >= exact / 10.0, "{est} vs {exact}");
        let sv = dense.singular_values();
        let k2 = sv.max() / sv.min();
        assert!(est / k2 < 10.0 * 200.0 && k2 / est < 10.0 * 200.0);
    }

    #[test]
    fn deterministic_factorisation() {
        let a = random_saddle(80, 10, 5);
        let b: Vec<f64> = (0..90).map(|i| i as f64).collect();
        let x1 = factor(&a).unwrap().solve(&b).unwrap();
        let x2 = factor(&a).unwrap().solve(&b).unwrap();
        assert_eq!(x1, x2);
    }

    #[test]
    fn unsymmetric_uses_lu() {
        let a = SparseMatrix::from_dense(&[vec![2.0, 1.0], vec![0.0, 3.0]]);
        let f = factor(&a).unwrap();
        assert_eq!(f.pivoting, "lu");
        let x = f.solve(&[3.0, 3.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }
}
