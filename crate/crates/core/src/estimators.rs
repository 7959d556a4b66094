//! Fixed-effects (within and LSDV) and random-effects/GLS estimators,
//! plus EBLUPs of the random effects.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::design::{DesignBundle, RStructureSpec};
use crate::error::{Error, Result};
use crate::gls::{gls_cross_products, pseudo_inverse, RMatrix, VSolver, PINV_TOL};
use crate::variance::VarianceEstimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    FeWithin,
    FeLsdv,
    ReGls,
}

/// A fitted model: coefficients, covariance, and (for RE fits) the
/// variance estimate, solver handle, and EBLUPs.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimator: EstimatorKind,
    pub labels: Vec<String>,
    pub beta: DVector<f64>,
    pub var_beta: DMatrix<f64>,
    /// EBLUPs; absent for FE fits and for RE fits before
    /// `compute_eblups` runs.
    pub eta: Option<DVector<f64>>,
    /// Variance components used by the RE fit.
    pub variance: Option<VarianceEstimate>,
    /// Residual variance of the FE regression.
    pub sigma2_within: Option<f64>,
    /// GLS residual scale q / (n - rank); multiplies the information
    /// inverse in `var_beta` for RE fits.
    pub gls_scale: f64,
    /// Estimated unit effects for LSDV fits, indexed like `labels_z`,
    /// with the first unit as the reference level.
    pub unit_effects: Option<Vec<f64>>,
    pub solver: Option<Arc<VSolver>>,
    pub x_rank: usize,
}

impl FitResult {
    pub fn coef(&self, label: &str) -> Option<f64> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| self.beta[i])
    }
}

fn within_transform(bundle: &DesignBundle) -> Result<(DMatrix<f64>, DVector<f64>, Vec<String>)> {
    let counts = bundle.group_counts();
    if let Some(j) = counts.iter().position(|&c| c < 2) {
        return Err(Error::InsufficientData(format!(
            "unit '{}' has fewer than 2 observations; the within estimator needs \
             at least 2 rows per unit",
            bundle.labels_z[j]
        )));
    }
    let slope_cols = bundle.slope_cols();
    if slope_cols.is_empty() {
        return Err(Error::InsufficientData(
            "the within estimator needs at least one slope regressor".into(),
        ));
    }
    let n = bundle.n();
    let mut xw = DMatrix::zeros(n, slope_cols.len());
    let mut labels = Vec::with_capacity(slope_cols.len());
    for (c, &col) in slope_cols.iter().enumerate() {
        xw.set_column(c, &bundle.x.column(col).into_owned());
        labels.push(bundle.labels_x[col].clone());
    }
    let mut yw = bundle.y.clone();
    let m = bundle.m();
    let mut xmeans: DMatrix<f64> = DMatrix::zeros(m, slope_cols.len());
    let mut ymeans: DVector<f64> = DVector::zeros(m);
    for (i, &g) in bundle.group_of_row.iter().enumerate() {
        for j in 0..slope_cols.len() {
            xmeans[(g, j)] += xw[(i, j)];
        }
        ymeans[g] += yw[i];
    }
    for g in 0..m {
        let c = counts[g] as f64;
        for j in 0..slope_cols.len() {
            xmeans[(g, j)] /= c;
        }
        ymeans[g] /= c;
    }
    for (i, &g) in bundle.group_of_row.iter().enumerate() {
        for j in 0..slope_cols.len() {
            xw[(i, j)] -= xmeans[(g, j)];
        }
        yw[i] -= ymeans[g];
    }
    Ok((xw, yw, labels))
}

fn rank_error_naming_columns(x: &DMatrix<f64>, labels: &[String], rank: usize) -> Error {
    let mut degenerate = Vec::new();
    let scale = x.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1.0);
    for (j, label) in labels.iter().enumerate() {
        if x.column(j).norm() <= 1e-12 * scale {
            degenerate.push(label.clone());
        }
    }
    if degenerate.is_empty() {
        Error::RankDeficient(format!(
            "transformed design has rank {rank} < {} columns ({})",
            x.ncols(),
            labels.join(", ")
        ))
    } else {
        Error::RankDeficient(format!(
            "columns collinear after transformation: {}",
            degenerate.join(", ")
        ))
    }
}

/// Within (fixed-effects) estimator: OLS on unit-demeaned data with
/// var_beta = sigma2_w (X~'X~)^-1 and sigma2_w = RSS / (n - N - p).
pub fn fit_fe_within(bundle: &DesignBundle) -> Result<FitResult> {
    let (xw, yw, labels) = within_transform(bundle)?;
    let p_slope = labels.len();
    let xtx = xw.transpose() * &xw;
    let (xtx_inv, rank) = pseudo_inverse(&xtx, PINV_TOL);
    if rank < p_slope {
        return Err(rank_error_naming_columns(&xw, &labels, rank));
    }
    let beta = &xtx_inv * (xw.transpose() * &yw);
    let resid = &yw - &xw * &beta;
    let rss = resid.dot(&resid);
    let df = bundle.n() as isize - bundle.m() as isize - p_slope as isize;
    if df <= 0 {
        return Err(Error::InsufficientData(format!(
            "within estimator has no residual degrees of freedom \
             (n = {}, units = {}, slopes = {p_slope})",
            bundle.n(),
            bundle.m()
        )));
    }
    let sigma2_w = rss / df as f64;
    let var_beta = &xtx_inv * sigma2_w;
    Ok(FitResult {
        estimator: EstimatorKind::FeWithin,
        labels,
        beta,
        var_beta,
        eta: None,
        variance: None,
        sigma2_within: Some(sigma2_w),
        gls_scale: 1.0,
        unit_effects: None,
        solver: None,
        x_rank: rank,
    })
}

/// LSDV (least-squares dummy variables) estimator: OLS with unit
/// indicators, first unit as the reference level. Reports the intercept
/// and slopes; slope estimates coincide with the within estimator.
pub fn fit_fe_lsdv(bundle: &DesignBundle) -> Result<FitResult> {
    let n = bundle.n();
    let m = bundle.m();
    let slope_cols = bundle.slope_cols();
    let p_slope = slope_cols.len();
    let n_dummies = m.saturating_sub(1);
    let p_full = 1 + p_slope + n_dummies;
    if n <= m + p_slope {
        return Err(Error::InsufficientData(format!(
            "LSDV needs n > units + slopes, got n = {n}, units = {m}, slopes = {p_slope}"
        )));
    }

    let mut x = DMatrix::zeros(n, p_full);
    let mut labels = vec!["(Intercept)".to_string()];
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    for (c, &col) in slope_cols.iter().enumerate() {
        x.set_column(1 + c, &bundle.x.column(col).into_owned());
        labels.push(bundle.labels_x[col].clone());
    }
    for d in 1..m {
        for (i, &g) in bundle.group_of_row.iter().enumerate() {
            if g == d {
                x[(i, 1 + p_slope + d - 1)] = 1.0;
            }
        }
        labels.push(format!("unit={}", bundle.labels_z[d]));
    }

    let xtx = x.transpose() * &x;
    let (xtx_inv, rank) = pseudo_inverse(&xtx, PINV_TOL);
    if rank < p_full {
        return Err(rank_error_naming_columns(&x, &labels, rank));
    }
    let beta_full = &xtx_inv * (x.transpose() * &bundle.y);
    let resid = &bundle.y - &x * &beta_full;
    let rss = resid.dot(&resid);
    let df = (n - p_full) as f64;
    let sigma2 = rss / df;
    let var_full = &xtx_inv * sigma2;

    let keep = 1 + p_slope;
    let beta = DVector::from_iterator(keep, (0..keep).map(|i| beta_full[i]));
    let var_beta = DMatrix::from_fn(keep, keep, |i, j| var_full[(i, j)]);
    let mut unit_effects = vec![0.0; m];
    for d in 1..m {
        unit_effects[d] = beta_full[1 + p_slope + d - 1];
    }
    Ok(FitResult {
        estimator: EstimatorKind::FeLsdv,
        labels: labels[..keep].to_vec(),
        beta,
        var_beta,
        eta: None,
        variance: None,
        sigma2_within: Some(sigma2),
        gls_scale: 1.0,
        unit_effects: Some(unit_effects),
        solver: None,
        x_rank: rank,
    })
}

fn r_matrix_for(bundle: &DesignBundle, sigma2_eps: f64) -> RMatrix {
    match &bundle.r_structure {
        RStructureSpec::ScaledIdentity => RMatrix::scaled_identity(bundle.n(), sigma2_eps),
        RStructureSpec::BlockDiagonal(blocks) => RMatrix::BlockDiagonal {
            n: bundle.n(),
            blocks: blocks.clone(),
        },
    }
}

/// Random-effects / GLS estimator:
/// beta = (X'V^-1X)^- X'V^-1 y with V = Z G Z' + R built from the
/// variance estimate. `var_beta` is the information inverse scaled by
/// the GLS residual variance q / (n - rank), matching the classical
/// panel implementation of the Hausman test.
pub fn fit_re(bundle: &DesignBundle, variance: &VarianceEstimate) -> Result<FitResult> {
    let g = variance.g_diag(bundle)?;
    let r = r_matrix_for(bundle, variance.sigma2_eps);
    let solver = Arc::new(VSolver::new(&bundle.z, &g, &r)?);
    let (xtvix, xtviy, _) = gls_cross_products(&solver, &bundle.x, &bundle.y)?;
    let (a, rank) = pseudo_inverse(&xtvix, PINV_TOL);
    let beta = &a * &xtviy;
    let resid = &bundle.y - &bundle.x * &beta;
    let vresid = solver.solve_vec(&resid)?;
    let q = resid.dot(&vresid);
    let df = bundle.n() as isize - rank as isize;
    if df <= 0 {
        return Err(Error::InsufficientData(format!(
            "GLS has no residual degrees of freedom (n = {}, rank = {rank})",
            bundle.n()
        )));
    }
    let gls_scale = q / df as f64;
    let var_beta = &a * gls_scale;
    Ok(FitResult {
        estimator: EstimatorKind::ReGls,
        labels: bundle.labels_x.clone(),
        beta,
        var_beta,
        eta: None,
        variance: Some(variance.clone()),
        sigma2_within: None,
        gls_scale,
        unit_effects: None,
        solver: Some(solver),
        x_rank: rank,
    })
}

/// EBLUPs eta = G Z' V^-1 (y - X beta); stores them into the fit and
/// returns them.
pub fn compute_eblups(fit: &mut FitResult, bundle: &DesignBundle) -> Result<DVector<f64>> {
    if fit.estimator != EstimatorKind::ReGls {
        return Err(Error::Parameter(
            "EBLUPs are defined for the RE-GLS estimator".into(),
        ));
    }
    let solver = fit
        .solver
        .as_ref()
        .ok_or_else(|| Error::Parameter("RE fit is missing its solver handle".into()))?;
    let resid = &bundle.y - &bundle.x * &fit.beta;
    let vresid = solver.solve_vec(&resid)?;
    let ztvr = solver.z().tr_mul_vec(&vresid);
    let g = solver.g_diag();
    let eta = DVector::from_iterator(
        solver.m(),
        ztvr.iter().zip(g.iter()).map(|(v, gk)| v * gk),
    );
    fit.eta = Some(eta.clone());
    Ok(eta)
}
