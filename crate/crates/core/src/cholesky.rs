//! Sparse Cholesky factorization `P A Pᵀ = C Cᵀ` with a minimum-degree fill-reducing
//! ordering. The symbolic pattern of `C` is recorded while the ordering eliminates
//! vertices, so no separate elimination-tree pass is needed.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sparse::CscMatrix;

/// Relative pivot tolerance: a pivot below `PIVOT_TOL * max(diag(A))` is singular.
pub const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    /// `perm[k]` is the original index eliminated at step `k`.
    perm: Vec<usize>,
    /// `inv[i]` is the elimination step of original index `i`.
    inv: Vec<usize>,
    /// Lower-triangular factor in the permuted ordering, diagonal stored first in each column.
    factor: CscMatrix,
}

struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn new(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
        }
    }
    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }
    fn remove(&mut self, i: usize) {
        self.words[i / 64] &= !(1 << (i % 64));
    }
    fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
    fn union_with(&mut self, other: &BitSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
    }
    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut bits = w;
            std::iter::from_fn(move || {
                if bits == 0 {
                    None
                } else {
                    let t = bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    Some(wi * 64 + t)
                }
            })
        })
    }
}

/// Minimum-degree ordering on the explicit elimination graph. Ties are broken by the
/// smallest index. Returns the ordering and, for each step, the neighbors that remain
/// when the vertex is eliminated (the column pattern of the factor, original indices).
fn minimum_degree(a: &CscMatrix) -> (Vec<usize>, Vec<Vec<usize>>) {
    let n = a.nrows();
    let mut adj: Vec<BitSet> = (0..n).map(|_| BitSet::new(n)).collect();
    for (r, c, _) in a.triplets() {
        if r != c {
            adj[r].insert(c);
            adj[c].insert(r);
        }
    }
    let mut degree: Vec<usize> = adj.iter().map(BitSet::count).collect();
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);
    let mut patterns = Vec::with_capacity(n);
    for _ in 0..n {
        let v = (0..n)
            .filter(|&i| alive[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("vertex left");
        alive[v] = false;
        let nbrs: Vec<usize> = adj[v].iter().collect();
        let clique = std::mem::replace(&mut adj[v], BitSet::new(0));
        for &u in &nbrs {
            adj[u].union_with(&clique);
            adj[u].remove(u);
            adj[u].remove(v);
            degree[u] = adj[u].count();
        }
        order.push(v);
        patterns.push(nbrs);
    }
    (order, patterns)
}

impl SparseCholesky {
    /// Factors a symmetric positive-definite matrix given with both triangles stored.
    pub fn factor(a: &CscMatrix) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n}x{n}"),
                actual: format!("{}x{}", a.nrows(), a.ncols()),
            });
        }
        let (perm, patterns) = minimum_degree(a);
        let mut inv = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }

        // Symbolic structure in permuted indices.
        let mut col_ptr = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        let mut row_lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        for k in 0..n {
            let mut rows: Vec<usize> = patterns[k].iter().map(|&i| inv[i]).collect();
            rows.sort_unstable();
            row_idx.push(k);
            for &r in &rows {
                debug_assert!(r > k);
                row_lists[r].push(k);
                row_idx.push(r);
            }
            col_ptr[k + 1] = row_idx.len();
        }
        let mut values = vec![0.0; row_idx.len()];

        let max_diag = a.diagonal().into_iter().fold(0.0_f64, f64::max);
        let tol = PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE);

        let mut work = vec![0.0; n];
        let mut cursor: Vec<usize> = col_ptr[..n].to_vec();
        for j in 0..n {
            // Scatter lower part of permuted column j.
            for (r, v) in a.col(perm[j]) {
                let pr = inv[r];
                if pr >= j {
                    work[pr] += v;
                }
            }
            for &k in &row_lists[j] {
                // Advance the cursor of column k to row j.
                while row_idx[cursor[k]] < j {
                    cursor[k] += 1;
                }
                let ljk = values[cursor[k]];
                for p in cursor[k]..col_ptr[k + 1] {
                    work[row_idx[p]] -= values[p] * ljk;
                }
            }
            let d = work[j];
            if !(d > tol) {
                return Err(Error::SingularReducedSystem {
                    column: perm[j],
                    pivot: d,
                });
            }
            let ljj = d.sqrt();
            for p in col_ptr[j]..col_ptr[j + 1] {
                let r = row_idx[p];
                values[p] = if r == j { ljj } else { work[r] / ljj };
                work[r] = 0.0;
            }
        }
        let factor = CscMatrix::from_parts(n, n, col_ptr, row_idx, values)?;
        Ok(Self { n, perm, inv, factor })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Lower-triangular factor `C` (permuted ordering).
    pub fn factor_l(&self) -> &CscMatrix {
        &self.factor
    }

    /// `C⁻¹ z` in place (forward substitution, permuted ordering).
    fn forward(&self, z: &mut [f64]) {
        let l = &self.factor;
        for j in 0..self.n {
            let mut it = l.col(j);
            let (_, d) = it.next().expect("diagonal");
            let x = z[j] / d;
            z[j] = x;
            if x != 0.0 {
                for (r, v) in it {
                    z[r] -= v * x;
                }
            }
        }
    }

    /// `C⁻ᵀ z` in place.
    fn backward(&self, z: &mut [f64]) {
        let l = &self.factor;
        for j in (0..self.n).rev() {
            let mut it = l.col(j);
            let (_, d) = it.next().expect("diagonal");
            let mut s = z[j];
            for (r, v) in it {
                s -= v * z[r];
            }
            z[j] = s / d;
        }
    }

    /// Solves `A X = B` column by column.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n);
        let mut out = DMatrix::zeros(self.n, b.ncols());
        let mut z = vec![0.0; self.n];
        for c in 0..b.ncols() {
            for k in 0..self.n {
                z[k] = b[(self.perm[k], c)];
            }
            self.forward(&mut z);
            self.backward(&mut z);
            for k in 0..self.n {
                out[(self.perm[k], c)] = z[k];
            }
        }
        out
    }

    /// `‖C⁻¹ P b‖²` for each column `b`, i.e. `bᵀ A⁻¹ b`.
    pub fn inverse_quadratic_forms(&self, b: &DMatrix<f64>) -> Vec<f64> {
        let mut z = vec![0.0; self.n];
        (0..b.ncols())
            .map(|c| {
                for k in 0..self.n {
                    z[k] = b[(self.perm[k], c)];
                }
                self.forward(&mut z);
                z.iter().map(|x| x * x).sum()
            })
            .collect()
    }

    /// Elimination step of an original index.
    pub fn position(&self, i: usize) -> usize {
        self.inv[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::TripletBuilder;

    fn path_laplacian_plus_identity(n: usize) -> CscMatrix {
        let mut t = TripletBuilder::new(n, n);
        for i in 0..n {
            t.push(i, i, 1.0);
        }
        for i in 0..n - 1 {
            t.push(i, i, 1.0);
            t.push(i + 1, i + 1, 1.0);
            t.push(i, i + 1, -1.0);
            t.push(i + 1, i, -1.0);
        }
        t.build()
    }

    #[test]
    fn factor_reconstructs_matrix() {
        let a = path_laplacian_plus_identity(12);
        let ch = SparseCholesky::factor(&a).unwrap();
        let l = ch.factor_l().to_dense();
        let llt = &l * l.transpose();
        let dense = a.to_dense();
        for i in 0..12 {
            for j in 0..12 {
                let want = dense[(ch.perm()[i], ch.perm()[j])];
                assert!((llt[(i, j)] - want).abs() < 1e-12);
            }
        }
        for j in 0..12 {
            assert!(l[(j, j)] > 0.0);
        }
    }

    #[test]
    fn path_has_no_fill() {
        let a = path_laplacian_plus_identity(30);
        let ch = SparseCholesky::factor(&a).unwrap();
        assert_eq!(ch.factor_l().nnz(), 30 + 29);
    }

    #[test]
    fn solve_matches_dense() {
        let a = path_laplacian_plus_identity(9);
        let ch = SparseCholesky::factor(&a).unwrap();
        let b = DMatrix::from_fn(9, 2, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let x = ch.solve(&b);
        assert!((a.to_dense() * &x - &b).norm() < 1e-12);
        let q = ch.inverse_quadratic_forms(&b);
        let dense_inv = a.to_dense().try_inverse().unwrap();
        for c in 0..2 {
            let bc = b.column(c);
            let want = (bc.transpose() * &dense_inv * bc)[(0, 0)];
            assert!((q[c] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_matrix_is_rejected() {
        // Laplacian of a path (no identity shift) is singular.
        let mut t = TripletBuilder::new(3, 3);
        for (i, j) in [(0, 1), (1, 2)] {
            t.push(i, i, 1.0);
            t.push(j, j, 1.0);
            t.push(i, j, -1.0);
            t.push(j, i, -1.0);
        }
        let err = SparseCholesky::factor(&t.build()).unwrap_err();
        assert!(matches!(err, Error::SingularReducedSystem { .. }));
    }

    #[test]
    fn empty_matrix() {
        let ch = SparseCholesky::factor(&CscMatrix::zeros(0, 0)).unwrap();
        assert_eq!(ch.dim(), 0);
        assert_eq!(ch.solve(&DMatrix::zeros(0, 3)).ncols(), 3);
    }
}
