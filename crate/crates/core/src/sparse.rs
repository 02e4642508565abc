//! Compressed sparse column storage used for incidence matrices, Laplacians and the
//! blocks of the data-matrix operator.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Real sparse matrix in compressed-column layout. Row indices within a column are
/// strictly increasing, so there are no duplicate entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Coordinate-format accumulator. Duplicates are summed in insertion order when
/// converted, which keeps assembly bit-reproducible.
#[derive(Debug, Clone, Default)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
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

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn build(self) -> CscMatrix {
        CscMatrix::from_triplets(self.nrows, self.ncols, self.entries)
    }
}

impl CscMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            col_ptr: vec![0; ncols + 1],
            row_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            col_ptr: (0..=n).collect(),
            row_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from `(row, col, value)` triplets, summing duplicates. Explicit zeros
    /// resulting from cancellation are kept so the pattern is structural.
    pub fn from_triplets(nrows: usize, ncols: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        // Counting sort into columns, then a stable sort by row inside each column, so
        // duplicates are summed in insertion order.
        let mut start = vec![0usize; ncols + 1];
        for &(r, c, _) in &entries {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds {nrows}x{ncols}");
            start[c + 1] += 1;
        }
        for c in 0..ncols {
            start[c + 1] += start[c];
        }
        let mut next = start.clone();
        let mut bucketed = vec![(0usize, 0.0f64); entries.len()];
        for (r, c, v) in entries {
            bucketed[next[c]] = (r, v);
            next[c] += 1;
        }
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(bucketed.len());
        let mut values: Vec<f64> = Vec::with_capacity(bucketed.len());
        for c in 0..ncols {
            let col = &mut bucketed[start[c]..start[c + 1]];
            col.sort_by_key(|&(r, _)| r);
            let mut last = None;
            for &(r, v) in col.iter() {
                if last == Some(r) {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            col_ptr[c + 1] = row_idx.len();
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Direct construction from compressed arrays. Validates the layout.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        col_ptr: Vec<usize>,
        row_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if col_ptr.len() != ncols + 1 || row_idx.len() != values.len() || col_ptr[ncols] != values.len() {
            return Err(Error::InvalidArgument("inconsistent CSC arrays".into()));
        }
        for c in 0..ncols {
            let (a, b) = (col_ptr[c], col_ptr[c + 1]);
            if a > b {
                return Err(Error::InvalidArgument("column pointers not monotone".into()));
            }
            for k in a..b {
                if row_idx[k] >= nrows || (k > a && row_idx[k] <= row_idx[k - 1]) {
                    return Err(Error::InvalidArgument(format!("bad row index in column {c}")));
                }
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite value".into()));
        }
        Ok(Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Iterator over `(row, value)` pairs of column `c`.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.col_ptr[c], self.col_ptr[c + 1]);
        self.row_idx[a..b].iter().copied().zip(self.values[a..b].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (a, b) = (self.col_ptr[c], self.col_ptr[c + 1]);
        match self.row_idx[a..b].binary_search(&r) {
            Ok(k) => self.values[a + k],
            Err(_) => 0.0,
        }
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| self.col(c).map(move |(r, v)| (r, c, v)))
    }

    pub fn transpose(&self) -> CscMatrix {
        let mut counts = vec![0usize; self.nrows + 1];
        for &r in &self.row_idx {
            counts[r + 1] += 1;
        }
        for r in 0..self.nrows {
            counts[r + 1] += counts[r];
        }
        let col_ptr = counts.clone();
        let mut next = counts;
        let mut row_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for c in 0..self.ncols {
            for (r, v) in self.col(c) {
                let k = next[r];
                row_idx[k] = c;
                values[k] = v;
                next[r] += 1;
            }
        }
        CscMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// Scales column `c` by `s[c]`.
    pub fn scale_columns(&self, s: &[f64]) -> CscMatrix {
        assert_eq!(s.len(), self.ncols);
        let mut out = self.clone();
        for c in 0..self.ncols {
            for k in out.col_ptr[c]..out.col_ptr[c + 1] {
                out.values[k] *= s[c];
            }
        }
        out
    }

    /// Removes the given row and shifts the rows below it up by one.
    pub fn remove_row(&self, row: usize) -> CscMatrix {
        let t = self
            .triplets()
            .filter(|&(r, _, _)| r != row)
            .map(|(r, c, v)| (if r > row { r - 1 } else { r }, c, v))
            .collect();
        CscMatrix::from_triplets(self.nrows - 1, self.ncols, t)
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &CscMatrix) -> CscMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut col_ptr = vec![0usize; other.ncols + 1];
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        let mut work = vec![0.0; self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut pattern: Vec<usize> = Vec::new();
        for j in 0..other.ncols {
            pattern.clear();
            for (k, b) in other.col(j) {
                for (i, a) in self.col(k) {
                    if mark[i] != j {
                        mark[i] = j;
                        pattern.push(i);
                        work[i] = 0.0;
                    }
                    work[i] += a * b;
                }
            }
            pattern.sort_unstable();
            for &i in &pattern {
                row_idx.push(i);
                values.push(work[i]);
            }
            col_ptr[j + 1] = row_idx.len();
        }
        CscMatrix {
            nrows: self.nrows,
            ncols: other.ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    /// `self * self^T`.
    pub fn gram(&self) -> CscMatrix {
        self.matmul(&self.transpose())
    }

    /// `y += alpha * self * x` for a dense matrix `x`.
    pub fn mul_dense_acc(&self, x: &DMatrix<f64>, alpha: f64, y: &mut DMatrix<f64>) {
        assert_eq!(x.nrows(), self.ncols);
        assert_eq!(y.nrows(), self.nrows);
        assert_eq!(x.ncols(), y.ncols());
        for m in 0..x.ncols() {
            for c in 0..self.ncols {
                let xc = alpha * x[(c, m)];
                if xc == 0.0 {
                    continue;
                }
                for (r, v) in self.col(c) {
                    y[(r, m)] += v * xc;
                }
            }
        }
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.nrows, x.ncols());
        self.mul_dense_acc(x, 1.0, &mut y);
        y
    }

    /// `self^T * x` without forming the transpose.
    pub fn tr_mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.nrows);
        let mut y = DMatrix::zeros(self.ncols, x.ncols());
        for m in 0..x.ncols() {
            for c in 0..self.ncols {
                let mut s = 0.0;
                for (r, v) in self.col(c) {
                    s += v * x[(r, m)];
                }
                y[(c, m)] = s;
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            d[(r, c)] += v;
        }
        d
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn max_abs_asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut worst: f64 = 0.0;
        for (r, c, v) in self.triplets() {
            worst = worst.max((v - t.get(r, c)).abs());
        }
        worst
    }
}
