//! Row-major sparse matrix with just the operations the mixed-model
//! kernels need: matrix-vector products, transposed products against
//! dense blocks, column sums, and densification for oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sparse matrix stored as per-row `(column, value)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMat {
    nrows: usize,
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseMat {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        SparseMat {
            nrows,
            ncols,
            rows: vec![Vec::new(); nrows],
        }
    }

    /// Builds from 0-based triplets. Duplicate entries are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut m = SparseMat::new(nrows, ncols);
        for &(i, j, v) in triplets {
            if i >= nrows || j >= ncols {
                return Err(Error::Dimension(format!(
                    "triplet ({i}, {j}) out of bounds for {nrows}x{ncols} matrix"
                )));
            }
            m.add(i, j, v);
        }
        for row in &mut m.rows {
            row.sort_by_key(|&(j, _)| j);
            row.dedup_by(|a, b| {
                if a.0 == b.0 {
                    b.1 += a.1;
                    true
                } else {
                    false
                }
            });
        }
        Ok(m)
    }

    /// Incidence matrix mapping each row to a single group column.
    pub fn incidence(group_of_row: &[usize], ncols: usize) -> Self {
        let mut m = SparseMat::new(group_of_row.len(), ncols);
        for (i, &g) in group_of_row.iter().enumerate() {
            m.add(i, g, 1.0);
        }
        m
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        if v != 0.0 {
            self.rows[i].push((j, v));
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, v)| (i, j, v)))
    }

    /// `self * v`
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows);
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = row.iter().map(|&(j, w)| w * v[j]).sum();
        }
        out
    }

    /// `self' * v`
    pub fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[j] += w * v[i];
            }
        }
        out
    }

    /// `self' * a` for dense `a` with `self.nrows()` rows.
    pub fn tr_mul_dense(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ncols, a.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                for c in 0..a.ncols() {
                    out[(j, c)] += w * a[(i, c)];
                }
            }
        }
        out
    }

    /// `self * a` for dense `a` with `self.ncols()` rows.
    pub fn mul_dense(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, a.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                for c in 0..a.ncols() {
                    out[(i, c)] += w * a[(j, c)];
                }
            }
        }
        out
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.ncols];
        for row in &self.rows {
            for &(j, v) in row {
                sums[j] += v;
            }
        }
        sums
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            out[(i, j)] += v;
        }
        out
    }
}
