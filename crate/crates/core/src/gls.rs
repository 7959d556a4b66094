//! Linear-algebra kernels shared by the estimators and diagnostics:
//! solves against V = ZGZ' + R, symmetric pseudo-inverses, and GLS
//! cross products.
//!
//! When every diagonal entry of G is strictly positive the solver uses
//! the Woodbury identity
//!
//!   V^-1 = R^-1 - R^-1 Z (G^-1 + Z' R^-1 Z)^-1 Z' R^-1
//!
//! so that only an m x m factorization is required. For singular G it
//! falls back to a dense factorization of V itself.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::sparse::SparseMat;

/// Relative eigenvalue cutoff for pseudo-inverses and rank decisions.
pub const PINV_TOL: f64 = 1e-10;

/// Error covariance structure with concrete values.
#[derive(Debug, Clone)]
pub enum RMatrix {
    /// R = scale * I_n
    ScaledIdentity { n: usize, scale: f64 },
    /// Block-diagonal R; each block owns an explicit set of row indices.
    BlockDiagonal {
        n: usize,
        blocks: Vec<(Vec<usize>, DMatrix<f64>)>,
    },
}

impl RMatrix {
    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        RMatrix::ScaledIdentity { n, scale }
    }

    pub fn nrows(&self) -> usize {
        match self {
            RMatrix::ScaledIdentity { n, .. } => *n,
            RMatrix::BlockDiagonal { n, .. } => *n,
        }
    }

    /// Multiplies a vector by R.
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            RMatrix::ScaledIdentity { scale, .. } => v * *scale,
            RMatrix::BlockDiagonal { n, blocks } => {
                let mut out = DVector::zeros(*n);
                for (rows, mat) in blocks {
                    let sub = DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]));
                    let prod = mat * sub;
                    for (k, &i) in rows.iter().enumerate() {
                        out[i] = prod[k];
                    }
                }
                out
            }
        }
    }

    /// Rescales R by a positive factor, keeping the structure.
    pub fn scaled_by(&self, factor: f64) -> Self {
        match self {
            RMatrix::ScaledIdentity { n, scale } => RMatrix::ScaledIdentity {
                n: *n,
                scale: scale * factor,
            },
            RMatrix::BlockDiagonal { n, blocks } => RMatrix::BlockDiagonal {
                n: *n,
                blocks: blocks
                    .iter()
                    .map(|(rows, mat)| (rows.clone(), mat * factor))
                    .collect(),
            },
        }
    }
}

/// Cholesky-factorized R, ready for repeated solves.
#[derive(Debug)]
enum RFactor {
    Scaled {
        n: usize,
        scale: f64,
    },
    Blocks {
        n: usize,
        blocks: Vec<(Vec<usize>, Cholesky<f64, Dyn>)>,
        log_det: f64,
    },
}

impl RFactor {
    fn new(r: &RMatrix) -> Result<Self> {
        match r {
            RMatrix::ScaledIdentity { n, scale } => {
                if *scale <= 0.0 {
                    return Err(Error::Factorization(format!(
                        "scaled-identity R requires a positive scale, got {scale}"
                    )));
                }
                Ok(RFactor::Scaled {
                    n: *n,
                    scale: *scale,
                })
            }
            RMatrix::BlockDiagonal { n, blocks } => {
                let mut covered = vec![false; *n];
                let mut log_det = 0.0;
                let mut out = Vec::with_capacity(blocks.len());
                for (bi, (rows, mat)) in blocks.iter().enumerate() {
                    if mat.nrows() != rows.len() || mat.ncols() != rows.len() {
                        return Err(Error::Dimension(format!(
                            "R block {bi} is {}x{} but covers {} rows",
                            mat.nrows(),
                            mat.ncols(),
                            rows.len()
                        )));
                    }
                    for &i in rows {
                        if i >= *n {
                            return Err(Error::Dimension(format!(
                                "R block {bi} references row {i} beyond n = {n}"
                            )));
                        }
                        if covered[i] {
                            return Err(Error::Validity(format!(
                                "R blocks overlap at row {i}"
                            )));
                        }
                        covered[i] = true;
                    }
                    let sym = (mat + mat.transpose()) * 0.5;
                    let chol = Cholesky::new(sym).ok_or_else(|| {
                        Error::Factorization(format!(
                            "R block {bi} is not symmetric positive definite"
                        ))
                    })?;
                    log_det += chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
                    out.push((rows.clone(), chol));
                }
                if covered.iter().any(|&c| !c) {
                    let i = covered.iter().position(|&c| !c).unwrap();
                    return Err(Error::Validity(format!(
                        "R blocks do not cover row {i}"
                    )));
                }
                Ok(RFactor::Blocks {
                    n: *n,
                    blocks: out,
                    log_det,
                })
            }
        }
    }

    fn log_det(&self) -> f64 {
        match self {
            RFactor::Scaled { n, scale } => *n as f64 * scale.ln(),
            RFactor::Blocks { log_det, .. } => *log_det,
        }
    }

    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            RFactor::Scaled { scale, .. } => b / *scale,
            RFactor::Blocks { n, blocks, .. } => {
                let mut out = DVector::zeros(*n);
                for (rows, chol) in blocks {
                    let sub = DVector::from_iterator(rows.len(), rows.iter().map(|&i| b[i]));
                    let sol = chol.solve(&sub);
                    for (k, &i) in rows.iter().enumerate() {
                        out[i] = sol[k];
                    }
                }
                out
            }
        }
    }

    fn solve_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            RFactor::Scaled { scale, .. } => b / *scale,
            RFactor::Blocks { n, blocks, .. } => {
                let mut out = DMatrix::zeros(*n, b.ncols());
                for (rows, chol) in blocks {
                    let mut sub = DMatrix::zeros(rows.len(), b.ncols());
                    for (k, &i) in rows.iter().enumerate() {
                        sub.row_mut(k).copy_from(&b.row(i));
                    }
                    let sol = chol.solve(&sub);
                    for (k, &i) in rows.iter().enumerate() {
                        out.row_mut(i).copy_from(&sol.row(k));
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug)]
enum SolvePath {
    Woodbury {
        /// R^-1 Z, dense n x m.
        w: DMatrix<f64>,
        /// Cholesky of M = G^-1 + Z' R^-1 Z.
        m_chol: Cholesky<f64, Dyn>,
    },
    Dense {
        chol: Cholesky<f64, Dyn>,
    },
}

/// Solver handle over V = Z G Z' + R with G = diag(g).
#[derive(Debug)]
pub struct VSolver {
    z: SparseMat,
    g_diag: DVector<f64>,
    r: RFactor,
    path: SolvePath,
    log_det_v: f64,
    n: usize,
    m: usize,
}

impl VSolver {
    /// Builds the solver, choosing the Woodbury path when every G entry
    /// is strictly positive and a dense factorization of V otherwise.
    pub fn new(z: &SparseMat, g_diag: &DVector<f64>, r: &RMatrix) -> Result<Self> {
        Self::build(z, g_diag, r, false)
    }

    /// Forces the dense path regardless of G; used to cross-check the
    /// Woodbury path.
    pub fn new_dense(z: &SparseMat, g_diag: &DVector<f64>, r: &RMatrix) -> Result<Self> {
        Self::build(z, g_diag, r, true)
    }

    fn build(z: &SparseMat, g_diag: &DVector<f64>, r: &RMatrix, force_dense: bool) -> Result<Self> {
        let n = z.nrows();
        let m = z.ncols();
        if g_diag.len() != m {
            return Err(Error::Dimension(format!(
                "G has {} diagonal entries but Z has {} columns",
                g_diag.len(),
                m
            )));
        }
        if r.nrows() != n {
            return Err(Error::Dimension(format!(
                "R is {}x{} but Z has {} rows",
                r.nrows(),
                r.nrows(),
                n
            )));
        }
        if let Some(g) = g_diag.iter().find(|&&g| g < 0.0) {
            return Err(Error::Validity(format!(
                "G diagonal entries must be nonnegative, got {g}"
            )));
        }
        let rf = RFactor::new(r)?;

        let use_woodbury = !force_dense && g_diag.iter().all(|&g| g > 0.0);
        if use_woodbury {
            let w = rf.solve_dense(&z.to_dense());
            // M = G^-1 + Z' R^-1 Z
            let mut mmat = z.tr_mul_dense(&w);
            for j in 0..m {
                mmat[(j, j)] += 1.0 / g_diag[j];
            }
            let mmat = (&mmat + mmat.transpose()) * 0.5;
            let m_chol = Cholesky::new(mmat).ok_or_else(|| {
                Error::Factorization("G^-1 + Z'R^-1Z is not positive definite".into())
            })?;
            let log_det_m = m_chol
                .l()
                .diagonal()
                .iter()
                .map(|d| 2.0 * d.ln())
                .sum::<f64>();
            let log_det_g = g_diag.iter().map(|g| g.ln()).sum::<f64>();
            let log_det_v = log_det_m + log_det_g + rf.log_det();
            Ok(VSolver {
                z: z.clone(),
                g_diag: g_diag.clone(),
                r: rf,
                path: SolvePath::Woodbury { w, m_chol },
                log_det_v,
                n,
                m,
            })
        } else {
            // V = sum_k g_k z_k z_k' + R accumulated column by column
            let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
            for (i, j, val) in z.iter() {
                cols[j].push((i, val));
            }
            let mut v = DMatrix::zeros(n, n);
            for (k, col) in cols.iter().enumerate() {
                let g = g_diag[k];
                if g == 0.0 {
                    continue;
                }
                for &(i, vi) in col {
                    for &(j, vj) in col {
                        v[(i, j)] += g * vi * vj;
                    }
                }
            }
            match r {
                RMatrix::ScaledIdentity { scale, .. } => {
                    for i in 0..n {
                        v[(i, i)] += *scale;
                    }
                }
                RMatrix::BlockDiagonal { blocks, .. } => {
                    for (rows, mat) in blocks {
                        for (a, &i) in rows.iter().enumerate() {
                            for (b, &j) in rows.iter().enumerate() {
                                v[(i, j)] += mat[(a, b)];
                            }
                        }
                    }
                }
            }
            let v = (&v + v.transpose()) * 0.5;
            let chol = Cholesky::new(v)
                .ok_or_else(|| Error::Factorization("V = ZGZ' + R is not positive definite".into()))?;
            let log_det_v = chol
                .l()
                .diagonal()
                .iter()
                .map(|d| 2.0 * d.ln())
                .sum::<f64>();
            Ok(VSolver {
                z: z.clone(),
                g_diag: g_diag.clone(),
                r: rf,
                path: SolvePath::Dense { chol },
                log_det_v,
                n,
                m,
            })
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn z(&self) -> &SparseMat {
        &self.z
    }

    pub fn g_diag(&self) -> &DVector<f64> {
        &self.g_diag
    }

    pub fn log_det_v(&self) -> f64 {
        self.log_det_v
    }

    pub fn uses_woodbury(&self) -> bool {
        matches!(self.path, SolvePath::Woodbury { .. })
    }

    /// V^-1 b
    pub fn solve_vec(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        if b.len() != self.n {
            return Err(Error::Dimension(format!(
                "solve expects a length-{} vector, got {}",
                self.n,
                b.len()
            )));
        }
        Ok(match &self.path {
            SolvePath::Woodbury { w, m_chol } => {
                let u = self.r.solve_vec(b);
                let t = w.transpose() * b;
                let s = m_chol.solve(&t);
                u - w * s
            }
            SolvePath::Dense { chol } => chol.solve(b),
        })
    }

    /// V^-1 B, column by column.
    pub fn solve_dense(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if b.nrows() != self.n {
            return Err(Error::Dimension(format!(
                "solve expects {} rows, got {}",
                self.n,
                b.nrows()
            )));
        }
        Ok(match &self.path {
            SolvePath::Woodbury { w, m_chol } => {
                let u = self.r.solve_dense(b);
                let t = w.transpose() * b;
                let s = m_chol.solve(&t);
                u - w * s
            }
            SolvePath::Dense { chol } => chol.solve(b),
        })
    }

    /// V b, for residual checks.
    pub fn v_mul_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let zt_b = self.z.tr_mul_vec(b);
        let scaled = DVector::from_iterator(
            self.m,
            zt_b.iter().zip(self.g_diag.iter()).map(|(x, g)| x * g),
        );
        self.z.mul_vec(&scaled) + self.r_mul(b)
    }

    fn r_mul(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.r {
            RFactor::Scaled { scale, .. } => b * *scale,
            RFactor::Blocks { n, blocks, .. } => {
                let mut out = DVector::zeros(*n);
                for (rows, chol) in blocks {
                    let sub = DVector::from_iterator(rows.len(), rows.iter().map(|&i| b[i]));
                    let l = chol.l();
                    let prod = &l * (l.transpose() * sub);
                    for (k, &i) in rows.iter().enumerate() {
                        out[i] = prod[k];
                    }
                }
                out
            }
        }
    }
}

/// Moore-Penrose inverse of a symmetric matrix via eigendecomposition.
///
/// Eigenvalues with |lambda| <= tol * max|lambda| are treated as zero.
/// Returns the inverse together with the retained rank. The sign of
/// retained eigenvalues is preserved, so indefinite matrices invert to
/// indefinite matrices.
pub fn pseudo_inverse(a: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, usize) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_abs = eig
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .fold(0.0f64, f64::max);
    if max_abs == 0.0 {
        return (DMatrix::zeros(a.nrows(), a.ncols()), 0);
    }
    let cutoff = tol * max_abs;
    let mut rank = 0;
    let inv_vals: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l.abs() > cutoff {
                rank += 1;
                1.0 / l
            } else {
                0.0
            }
        })
        .collect();
    let q = &eig.eigenvectors;
    let mut out = DMatrix::zeros(a.nrows(), a.ncols());
    for (k, &iv) in inv_vals.iter().enumerate() {
        if iv != 0.0 {
            let col = q.column(k);
            for i in 0..a.nrows() {
                for j in 0..a.ncols() {
                    out[(i, j)] += iv * col[i] * col[j];
                }
            }
        }
    }
    (out, rank)
}

/// log pseudo-determinant of a symmetric PSD matrix (sum of logs of the
/// retained eigenvalues), with the same cutoff rule as `pseudo_inverse`.
pub fn log_pseudo_det(a: &DMatrix<f64>, tol: f64) -> (f64, usize) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let max_abs = eig
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .fold(0.0f64, f64::max);
    if max_abs == 0.0 {
        return (f64::NEG_INFINITY, 0);
    }
    let cutoff = tol * max_abs;
    let mut rank = 0;
    let mut acc = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l.abs() > cutoff {
            rank += 1;
            acc += l.abs().ln();
        }
    }
    (acc, rank)
}

/// GLS cross products through the solver:
/// (X'V^-1X, X'V^-1y, X'V^-1Z).
pub fn gls_cross_products(
    solver: &VSolver,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    if x.nrows() != solver.n() || y.len() != solver.n() {
        return Err(Error::Dimension(format!(
            "X has {} rows and y has {} entries; solver expects {}",
            x.nrows(),
            y.len(),
            solver.n()
        )));
    }
    let vix = solver.solve_dense(x)?;
    let xtvix = x.transpose() * &vix;
    let xtvix = (&xtvix + xtvix.transpose()) * 0.5;
    let xtviy = vix.transpose() * y;
    let ztvix = solver.z().tr_mul_dense(&vix); // m x p
    let xtviz = ztvix.transpose();
    Ok((xtvix, xtviy, xtviz))
}

/// Upper-tail probability of a chi-squared distribution computed through
/// the regularized upper incomplete gamma function, accurate far into
/// the tail.
pub fn chi_squared_sf(x: f64, df: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if df == 0 {
        return 0.0;
    }
    statrs::function::gamma::gamma_ur(df as f64 / 2.0, x / 2.0)
}
