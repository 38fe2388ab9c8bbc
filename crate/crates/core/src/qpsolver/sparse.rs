//! Compressed sparse column matrices and the few kernels the solver needs.

/// Sparse matrix in compressed-sparse-column form.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    /// Column pointers, length `ncols + 1`.
    pub col_ptr: Vec<usize>,
    /// Row indices, sorted ascending within each column.
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
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

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Builds from (row, col, value) triplets. Duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut by_col: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ncols];
        for &(r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            by_col[c].push((r, v));
        }
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for entries in by_col.iter_mut() {
            entries.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for &(r, v) in entries.iter() {
                if last == Some(r) {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
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

    /// Iterates the entries of column `j` as `(row, value)`.
    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.col_ptr[j];
        let hi = self.col_ptr[j + 1];
        self.row_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&r, &v)| (r, v))
    }

    /// y += A x
    pub fn mul_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                y[self.row_idx[p]] += self.values[p] * xj;
            }
        }
    }

    /// y = A x
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_add(x, &mut y);
        y
    }

    /// y += Aᵀ x
    pub fn mul_t_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for j in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[p] * x[self.row_idx[p]];
            }
            y[j] += acc;
        }
    }

    /// y = Aᵀ x
    pub fn mul_t(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.mul_t_add(x, &mut y);
        y
    }

    /// y += S x where `self` stores the upper triangle of symmetric S.
    pub fn sym_mul_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                let i = self.row_idx[p];
                let v = self.values[p];
                debug_assert!(i <= j);
                y[i] += v * x[j];
                if i != j {
                    y[j] += v * x[i];
                }
            }
        }
    }

    /// y = S x for upper-triangular-stored symmetric S.
    pub fn sym_mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.sym_mul_add(x, &mut y);
        y
    }

    /// Infinity norms of every column.
    pub fn col_inf_norms(&self) -> Vec<f64> {
        (0..self.ncols)
            .map(|j| {
                self.col(j)
                    .map(|(_, v)| v.abs())
                    .fold(0.0f64, f64::max)
            })
            .collect()
    }

    /// Infinity norms of every row.
    pub fn row_inf_norms(&self) -> Vec<f64> {
        let mut norms = vec![0.0f64; self.nrows];
        for p in 0..self.nnz() {
            let r = self.row_idx[p];
            norms[r] = norms[r].max(self.values[p].abs());
        }
        norms
    }

    /// Scales in place: A ← diag(left) · A · diag(right).
    pub fn scale(&mut self, left: &[f64], right: &[f64]) {
        debug_assert_eq!(left.len(), self.nrows);
        debug_assert_eq!(right.len(), self.ncols);
        for j in 0..self.ncols {
            for p in self.col_ptr[j]..self.col_ptr[j + 1] {
                self.values[p] *= left[self.row_idx[p]] * right[j];
            }
        }
    }

    /// Upper-triangular part (including the diagonal) of a square matrix.
    pub fn upper_triangle(&self) -> CscMatrix {
        assert_eq!(self.nrows, self.ncols);
        let mut trips = Vec::new();
        for j in 0..self.ncols {
            for (r, v) in self.col(j) {
                if r <= j {
                    trips.push((r, j, v));
                }
            }
        }
        CscMatrix::from_triplets(self.nrows, self.ncols, &trips)
    }

    /// Checks symmetry of a square matrix to `tol` (absolute, entrywise).
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let mut dense_check: std::collections::HashMap<(usize, usize), f64> =
            std::collections::HashMap::new();
        for j in 0..self.ncols {
            for (r, v) in self.col(j) {
                dense_check.insert((r, j), v);
            }
        }
        for (&(r, c), &v) in dense_check.iter() {
            let vt = dense_check.get(&(c, r)).copied().unwrap_or(0.0);
            if (v - vt).abs() > tol {
                return false;
            }
        }
        true
    }

    pub fn has_nan(&self) -> bool {
        self.values.iter().any(|v| !v.is_finite())
    }

    /// Dense copy, for small-matrix checks only.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for (r, v) in self.col(j) {
                m[(r, j)] += v;
            }
        }
        m
    }
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}
