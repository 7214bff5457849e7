//! Minimal CSR sparse matrix used for constraint matrices.
//!
//! The programs built here are small (hundreds of rows), so the only
//! operations provided are the ones the solver and differentiation code
//! actually need: matrix-vector products, column elimination, and dense
//! conversion for factorizations.

use nalgebra::DMatrix;

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from (row, col, value) triplets. Triplets may appear
    /// in any order; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            rows[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in &mut rows {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for &(c, v) in row.iter() {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
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

    /// Entries of row `r` as (column, value) pairs, ascending column order.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(&self.values[lo..hi])
            .map(|(&c, &v)| (c, v))
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for (c, v) in self.row(r) {
                acc += v * x[c];
            }
            y[r] = acc;
        }
        y
    }

    /// y = A' x
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                y[c] += v * x[r];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] = v;
            }
        }
        m
    }

    /// Removes the given columns, renumbering the survivors in order.
    /// `keep_map[j]` gives the new index of old column `j`, or `None` if
    /// dropped. Returns the reduced matrix together with, per row, the inner
    /// product of the dropped entries with `dropped_values` (indexed by old
    /// column), which callers fold into the right-hand side.
    pub fn eliminate_columns(
        &self,
        keep_map: &[Option<usize>],
        dropped_values: &[f64],
        new_ncols: usize,
    ) -> (SparseMatrix, Vec<f64>) {
        assert_eq!(keep_map.len(), self.ncols);
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut folded = vec![0.0; self.nrows];
        row_ptr.push(0);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                match keep_map[c] {
                    Some(nc) => {
                        col_idx.push(nc);
                        values.push(v);
                    }
                    None => folded[r] += v * dropped_values[c],
                }
            }
            row_ptr.push(col_idx.len());
        }
        (
            SparseMatrix {
                nrows: self.nrows,
                ncols: new_ncols,
                row_ptr,
                col_idx,
                values,
            },
            folded,
        )
    }

    /// Horizontal concatenation [self | other].
    pub fn hstack(&self, other: &SparseMatrix) -> SparseMatrix {
        assert_eq!(self.nrows, other.nrows);
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                col_idx.push(c);
                values.push(v);
            }
            for (c, v) in other.row(r) {
                col_idx.push(c + self.ncols);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols + other.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }
}
