//! Compressed sparse row matrices assembled from triplets.

use faer::sparse::{SparseColMat, SparseColMatRef, SymbolicSparseColMatRef, Triplet};

/// Unsorted `(row, col, value)` entries; duplicates are summed on compression.
#[derive(Clone, Debug, Default)]
pub struct Triplets {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(u32, u32, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row as u32, col as u32, value));
    }

    /// Appends `other` shifted by `(row_offset, col_offset)`, scaled by `scale`.
    pub fn extend_block(&mut self, other: &SparseMatrix, row_offset: usize, col_offset: usize, scale: f64) {
        for r in 0..other.nrows {
            for (c, v) in other.row(r) {
                self.push(r + row_offset, c + col_offset, scale * v);
            }
        }
    }

    pub fn into_csr(mut self) -> SparseMatrix {
        // stable sort keeps the summation order of duplicates reproducible
        self.entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices: Vec<usize> = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(u32, u32)> = None;
        for &(r, c, v) in &self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c as usize);
                values.push(v);
                indptr[r as usize + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..self.nrows {
            indptr[i + 1] += indptr[i];
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            values,
        }
    }
}

/// Sorted column lists per row, shared by matrices assembled on the same DOFs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pattern {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Pattern {
    pub fn from_rows(ncols: usize, mut rows: Vec<Vec<usize>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            indices.extend_from_slice(r);
            indptr.push(indices.len());
        }
        Self {
            nrows: rows.len(),
            ncols,
            indptr,
            indices,
        }
    }

    /// Couples every pair of DOFs within each group.
    pub fn from_groups<'a>(n: usize, groups: impl Iterator<Item = &'a [u32]>) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for g in groups {
            for &a in g {
                rows[a as usize].extend(g.iter().map(|&b| b as usize));
            }
        }
        Self::from_rows(n, rows)
    }

    pub fn zeros(&self) -> SparseMatrix {
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: vec![0.0; self.indices.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Triplets::new(nrows, ncols).into_csr()
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Triplets::new(n, n);
        for i in 0..n {
            t.push(i, i, 1.0);
        }
        t.into_csr()
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut t = Triplets::new(nrows, ncols);
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                if v != 0.0 {
                    t.push(i, j, v);
                }
            }
        }
        t.into_csr()
    }

    /// Adds `v` to an entry that must exist in the pattern.
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let span = self.indptr[r]..self.indptr[r + 1];
        let k = self.indices[span.clone()]
            .binary_search(&c)
            .unwrap_or_else(|_| panic!("entry ({r}, {c}) outside the sparsity pattern"));
        self.values[span.start + k] += v;
    }

    /// Adds a dense local matrix `local[a * cols.len() + b]` at `(rows[a], cols[b])`.
    pub fn add_local(&mut self, rows: &[u32], cols: &[u32], local: &[f64]) {
        let nc = cols.len();
        for (a, &r) in rows.iter().enumerate() {
            let r = r as usize;
            let span = self.indptr[r]..self.indptr[r + 1];
            let idx = &self.indices[span.clone()];
            for (b, &c) in cols.iter().enumerate() {
                let k = idx
                    .binary_search(&(c as usize))
                    .unwrap_or_else(|_| panic!("entry ({r}, {c}) outside the sparsity pattern"));
                self.values[span.start + k] += local[a * nc + b];
            }
        }
    }

    /// `alpha * self + beta * other` for matrices with the same pattern.
    pub fn combine(&self, alpha: f64, other: &Self, beta: f64) -> Self {
        assert!(self.same_pattern(other), "pattern mismatch");
        let mut out = self.clone();
        for (o, v) in out.values.iter_mut().zip(&other.values) {
            *o = alpha * *o + beta * v;
        }
        out
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// Applies the matrix to each component of a 2-vector field.
    pub fn matvec2(&self, x: &[[f64; 2]]) -> Vec<[f64; 2]> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| {
                let mut acc = [0.0; 2];
                for (c, v) in self.row(r) {
                    acc[0] += v * x[c][0];
                    acc[1] += v * x[c][1];
                }
                acc
            })
            .collect()
    }

    /// `sum_c x_c^T A y_c` over both components.
    pub fn bilinear2(&self, x: &[[f64; 2]], y: &[[f64; 2]]) -> f64 {
        let ay = self.matvec2(y);
        x.iter().zip(&ay).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Triplets::with_capacity(self.ncols, self.nrows, self.nnz());
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                t.push(c, r, v);
            }
        }
        t.into_csr()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                d[r][c] += v;
            }
        }
        d
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut worst: f64 = 0.0;
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                worst = worst.max((v - t.get(r, c)).abs());
            }
            for (c, v) in t.row(r) {
                worst = worst.max((v - self.get(r, c)).abs());
            }
        }
        worst
    }

    /// Induced 1-norm (maximum column sum).
    pub fn norm_1(&self) -> f64 {
        let mut col = vec![0.0; self.ncols];
        for (c, v) in self.indices.iter().zip(&self.values) {
            col[*c] += v.abs();
        }
        col.into_iter().fold(0.0, f64::max)
    }

    /// Exact symmetry of pattern and values.
    /// Replaces mirrored entries by their mean; the pattern must be symmetric.
    pub fn symmetrize(&mut self) {
        for r in 0..self.nrows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                let c = self.indices[p];
                if c <= r {
                    continue;
                }
                let span = self.indptr[c]..self.indptr[c + 1];
                if let Ok(q) = self.indices[span.clone()].binary_search(&r) {
                    let q = span.start + q;
                    let v = 0.5 * (self.values[p] + self.values[q]);
                    self.values[p] = v;
                    self.values[q] = v;
                }
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        (0..self.nrows).all(|r| {
            (self.indptr[r]..self.indptr[r + 1]).all(|p| {
                let c = self.indices[p];
                c == r || {
                    let span = self.indptr[c]..self.indptr[c + 1];
                    match self.indices[span.clone()].binary_search(&r) {
                        Ok(q) => self.values[span.start + q] == self.values[p],
                        Err(_) => false,
                    }
                }
            })
        })
    }

    /// Zero-copy column-major view of the transpose.
    pub fn transposed_view(&self) -> SparseColMatRef<'_, usize, f64> {
        let sym = SymbolicSparseColMatRef::new_checked(self.ncols, self.nrows, &self.indptr, None, &self.indices);
        SparseColMatRef::new(sym, &self.values)
    }

    pub fn same_pattern(&self, other: &Self) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.indptr == other.indptr
            && self.indices == other.indices
    }

    /// Column-major copy for the factorisation backend. The pattern of a CSR matrix
    /// is the pattern of the transposed CSC matrix, so symmetric inputs map directly.
    pub fn to_faer(&self) -> SparseColMat<usize, f64> {
        let trip: Vec<Triplet<usize, usize, f64>> = (0..self.nrows)
            .flat_map(|r| self.row(r).map(move |(c, v)| Triplet::new(r, c, v)))
            .collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &trip)
            .expect("valid sparse structure")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_summed() {
        let mut t = Triplets::new(2, 3);
        t.push(1, 2, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 2, 0.5);
        t.push(1, 0, -1.0);
        let m = t.into_csr();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(1, 2), 1.5);
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.matvec(&[1.0, 1.0, 2.0]), vec![2.0, 2.0]);
        assert_eq!(m.transpose().get(2, 1), 1.5);
    }

    #[test]
    fn asymmetry_and_norm() {
        let m = SparseMatrix::from_dense(&[vec![1.0, 2.0], vec![2.5, -4.0]]);
        assert_eq!(m.max_asymmetry(), 0.5);
        assert_eq!(m.norm_1(), 6.0);
        assert_eq!(m.to_faer().compute_nnz(), 4);
        assert!(!m.is_symmetric());
        let s = SparseMatrix::from_dense(&[vec![1.0, 2.0, 0.0], vec![2.0, -4.0, 3.0], vec![0.0, 3.0, 1.0]]);
        assert!(s.is_symmetric());
        let v = s.transposed_view();
        assert_eq!(v.to_dense()[(1, 2)], 3.0);
    }
}
