//! Variance-component estimation for the random-intercept panel model:
//! profiled REML over the ratio sigma2_eta / sigma2_eps, and the
//! Swamy-Arora within/between method-of-moments estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignBundle;
use crate::error::{Error, Result};
use crate::gls::{gls_cross_products, log_pseudo_det, pseudo_inverse, RMatrix, VSolver, PINV_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceMethod {
    Reml,
    SwamyArora,
    UserSupplied,
}

/// Estimated variance components. `sigma2_eta` carries one entry per
/// variance block, in `g_structure` order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub sigma2_eta: Vec<(String, f64)>,
    pub sigma2_eps: f64,
    pub method: VarianceMethod,
    pub reml_loglik: Option<f64>,
    /// True when a component was clamped to zero.
    pub boundary_flag: bool,
}

impl VarianceEstimate {
    /// Expands the per-block variances to the m-vector of G diagonal
    /// entries for a bundle.
    pub fn g_diag(&self, bundle: &DesignBundle) -> Result<DVector<f64>> {
        let mut g = DVector::zeros(bundle.m());
        for (label, members) in &bundle.g_structure {
            let value = self
                .sigma2_eta
                .iter()
                .find(|(l, _)| l == label)
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    Error::Parameter(format!("no variance estimate for block '{label}'"))
                })?;
            for &j in members {
                g[j] = value;
            }
        }
        Ok(g)
    }

    /// The single eta variance for one-block models.
    pub fn single_eta(&self) -> f64 {
        self.sigma2_eta.first().map(|(_, v)| *v).unwrap_or(0.0)
    }
}

const LOG_LAMBDA_LO: f64 = -12.0;
const LOG_LAMBDA_HI: f64 = 12.0;
const GOLDEN_TOL: f64 = 1e-9;

struct RemlEval {
    criterion: f64,
    rss: f64,
    rank_x: usize,
    log_det_v: f64,
    log_det_xtvx: f64,
}

fn reml_eval(bundle: &DesignBundle, log_lambda: f64) -> Result<RemlEval> {
    let lambda = log_lambda.exp();
    let m = bundle.m();
    let g = DVector::from_element(m, lambda);
    let r = RMatrix::scaled_identity(bundle.n(), 1.0);
    let solver = VSolver::new(&bundle.z, &g, &r)?;
    let (xtvix, xtviy, _) = gls_cross_products(&solver, &bundle.x, &bundle.y)?;
    let (a, rank_x) = pseudo_inverse(&xtvix, PINV_TOL);
    let beta = &a * &xtviy;
    let resid = &bundle.y - &bundle.x * &beta;
    let vresid = solver.solve_vec(&resid)?;
    let rss = resid.dot(&vresid);
    let scale = bundle.y.dot(&bundle.y).max(1.0);
    if rss <= 1e-14 * scale {
        return Err(Error::DegenerateData(
            "zero residual variance: the model fits the data exactly".into(),
        ));
    }
    let (log_det_xtvx, _) = log_pseudo_det(&xtvix, PINV_TOL);
    let df = bundle.n() - rank_x;
    let criterion =
        -0.5 * (solver.log_det_v() + log_det_xtvx + df as f64 * rss.ln());
    if !criterion.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite REML criterion at lambda = {lambda:.6e}"
        )));
    }
    Ok(RemlEval {
        criterion,
        rss,
        rank_x,
        log_det_v: solver.log_det_v(),
        log_det_xtvx,
    })
}

/// Profiled REML criterion at a given log variance ratio; exposed so
/// the optimizer can be checked against a grid oracle.
pub fn reml_profile_criterion(bundle: &DesignBundle, log_lambda: f64) -> Result<f64> {
    Ok(reml_eval(bundle, log_lambda)?.criterion)
}

/// Maximizes the profiled REML log-likelihood over
/// log(lambda) in [-12, 12] by a coarse scan, golden-section search,
/// and a final quadratic refinement.
pub fn estimate_reml(bundle: &DesignBundle) -> Result<VarianceEstimate> {
    if bundle.g_structure.len() != 1 {
        return Err(Error::Parameter(format!(
            "REML estimation supports a single variance block, got {}",
            bundle.g_structure.len()
        )));
    }
    if bundle.n() <= bundle.p() + 1 {
        return Err(Error::InsufficientData(format!(
            "REML needs n > p + 1, got n = {} with p = {}",
            bundle.n(),
            bundle.p()
        )));
    }

    let f = |ll: f64| reml_eval(bundle, ll).map(|e| e.criterion);

    // coarse scan to bracket the global maximum
    let coarse: usize = 61;
    let step = (LOG_LAMBDA_HI - LOG_LAMBDA_LO) / (coarse - 1) as f64;
    let mut best_i = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut values = Vec::with_capacity(coarse);
    for i in 0..coarse {
        let ll = LOG_LAMBDA_LO + step * i as f64;
        let v = f(ll)?;
        values.push(v);
        if v > best_val {
            best_val = v;
            best_i = i;
        }
    }
    let mut lo = LOG_LAMBDA_LO + step * best_i.saturating_sub(1) as f64;
    let mut hi = (LOG_LAMBDA_LO + step * (best_i + 1) as f64).min(LOG_LAMBDA_HI);

    // golden-section search
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi - lo > GOLDEN_TOL {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = f(x2)?;
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = f(x1)?;
        }
    }
    let (mut best_ll, mut best_crit) = if f1 > f2 { (x1, f1) } else { (x2, f2) };
    if best_val > best_crit {
        best_ll = LOG_LAMBDA_LO + step * best_i as f64;
        best_crit = best_val;
    }

    // quadratic refinement around the incumbent
    let h = 1e-4;
    let (lm, l0, lp) = (best_ll - h, best_ll, best_ll + h);
    if lm > LOG_LAMBDA_LO && lp < LOG_LAMBDA_HI {
        let (fm, f0, fp) = (f(lm)?, best_crit, f(lp)?);
        let denom = fm - 2.0 * f0 + fp;
        if denom < 0.0 {
            let vertex = l0 + h * (fm - fp) / (2.0 * denom);
            let vertex = vertex.clamp(LOG_LAMBDA_LO, LOG_LAMBDA_HI);
            let fv = f(vertex)?;
            if fv > best_crit {
                best_crit = fv;
                best_ll = vertex;
            }
        }
    }
    let _ = best_crit;

    let at_boundary = best_ll <= LOG_LAMBDA_LO + 1e-9;
    let eval = reml_eval(bundle, best_ll)?;
    let df = (bundle.n() - eval.rank_x) as f64;
    let sigma2_eps = eval.rss / df;
    let sigma2_eta = if at_boundary {
        0.0
    } else {
        best_ll.exp() * sigma2_eps
    };
    let loglik = -0.5
        * (eval.log_det_v
            + eval.log_det_xtvx
            + df * (1.0 + (2.0 * std::f64::consts::PI * sigma2_eps).ln()));
    let label = bundle.g_structure[0].0.clone();
    Ok(VarianceEstimate {
        sigma2_eta: vec![(label, sigma2_eta)],
        sigma2_eps,
        method: VarianceMethod::Reml,
        reml_loglik: Some(loglik),
        boundary_flag: at_boundary,
    })
}

/// Swamy-Arora estimator: sigma2_eps from the within residual sum of
/// squares, sigma2_eta from the between regression with the
/// degrees-of-freedom correction. Rank-deficient designs are handled
/// through generalized inverses with rank-based degrees of freedom.
pub fn estimate_swamy_arora(bundle: &DesignBundle) -> Result<VarianceEstimate> {
    if bundle.g_structure.len() != 1 {
        return Err(Error::Parameter(format!(
            "Swamy-Arora estimation supports a single variance block, got {}",
            bundle.g_structure.len()
        )));
    }
    let n = bundle.n();
    let n_groups = bundle.m();
    let counts = bundle.group_counts();
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InsufficientData(format!(
            "group '{}' has no observations",
            bundle.labels_z[j]
        )));
    }

    let slope_cols = bundle.slope_cols();
    let p_slope = slope_cols.len();

    // within: demean y and the slope columns inside each group
    let mut xw = DMatrix::zeros(n, p_slope);
    for (c, &col) in slope_cols.iter().enumerate() {
        xw.set_column(c, &bundle.x.column(col).into_owned());
    }
    let mut yw = bundle.y.clone();
    demean_within(&mut xw, &mut yw, &bundle.group_of_row, n_groups, &counts);

    let xtx = xw.transpose() * &xw;
    let (xtx_inv, rank_w) = pseudo_inverse(&xtx, PINV_TOL);
    let beta_w = &xtx_inv * (xw.transpose() * &yw);
    let resid_w = &yw - &xw * &beta_w;
    let rss_w = resid_w.dot(&resid_w);
    let df_w = n as isize - n_groups as isize - rank_w as isize;
    if df_w <= 0 {
        return Err(Error::InsufficientData(format!(
            "within regression has no residual degrees of freedom \
             (n = {n}, groups = {n_groups}, slopes = {rank_w})"
        )));
    }
    let sigma2_eps = rss_w / df_w as f64;

    // between: regression on the group means of every X column
    let p = bundle.p();
    let mut w = DMatrix::zeros(n_groups, p);
    let mut ybar = DVector::zeros(n_groups);
    for (i, &g) in bundle.group_of_row.iter().enumerate() {
        for j in 0..p {
            w[(g, j)] += bundle.x[(i, j)];
        }
        ybar[g] += bundle.y[i];
    }
    for g in 0..n_groups {
        let c = counts[g] as f64;
        for j in 0..p {
            w[(g, j)] /= c;
        }
        ybar[g] /= c;
    }
    let wtw = w.transpose() * &w;
    let (wtw_inv, rank_b) = pseudo_inverse(&wtw, PINV_TOL);
    let beta_b = &wtw_inv * (w.transpose() * &ybar);
    let resid_b = &ybar - &w * &beta_b;
    let rss_b = resid_b.dot(&resid_b);
    let df_b = n_groups as isize - rank_b as isize;
    if df_b <= 0 {
        return Err(Error::InsufficientData(format!(
            "between regression has no residual degrees of freedom \
             (groups = {n_groups}, between rank = {rank_b})"
        )));
    }

    // E[RSS_between] = sigma2_eta (N - rank) + sigma2_eps (tr D - tr P D)
    // with D = diag(1/T_i); solve for sigma2_eta.
    let tr_d: f64 = counts.iter().map(|&c| 1.0 / c as f64).sum();
    let mut wtdw = DMatrix::zeros(p, p);
    for g in 0..n_groups {
        let dg = 1.0 / counts[g] as f64;
        for a in 0..p {
            for b in 0..p {
                wtdw[(a, b)] += w[(g, a)] * dg * w[(g, b)];
            }
        }
    }
    let tr_pd = (&wtw_inv * &wtdw).trace();
    let raw_eta = (rss_b - sigma2_eps * (tr_d - tr_pd)) / df_b as f64;
    let boundary_flag = raw_eta < 0.0;
    let sigma2_eta = raw_eta.max(0.0);

    let label = bundle.g_structure[0].0.clone();
    Ok(VarianceEstimate {
        sigma2_eta: vec![(label, sigma2_eta)],
        sigma2_eps,
        method: VarianceMethod::SwamyArora,
        reml_loglik: None,
        boundary_flag,
    })
}

fn demean_within(
    x: &mut DMatrix<f64>,
    y: &mut DVector<f64>,
    group_of_row: &[usize],
    n_groups: usize,
    counts: &[usize],
) {
    let p = x.ncols();
    let mut xmeans: DMatrix<f64> = DMatrix::zeros(n_groups, p);
    let mut ymeans: DVector<f64> = DVector::zeros(n_groups);
    for (i, &g) in group_of_row.iter().enumerate() {
        for j in 0..p {
            xmeans[(g, j)] += x[(i, j)];
        }
        ymeans[g] += y[i];
    }
    for g in 0..n_groups {
        let c = counts[g] as f64;
        for j in 0..p {
            xmeans[(g, j)] /= c;
        }
        ymeans[g] /= c;
    }
    for (i, &g) in group_of_row.iter().enumerate() {
        for j in 0..p {
            x[(i, j)] -= xmeans[(g, j)];
        }
        y[i] -= ymeans[g];
    }
}
