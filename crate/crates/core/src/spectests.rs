//! Specification tests: the classical Hausman FE-vs-RE comparison and
//! the Mundlak-Wooldridge correlated-random-effects Wald test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::DesignBundle;
use crate::error::{Error, Result};
use crate::estimators::{fit_re, FitResult};
use crate::gls::{chi_squared_sf, pseudo_inverse, PINV_TOL};
use crate::variance::{estimate_reml, estimate_swamy_arora, VarianceEstimate};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HausmanResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    /// Per-slope RE - FE differences in comparison order.
    pub coef_diffs: Vec<(String, f64)>,
    /// Eigenvalues of Var(FE) - Var(RE), ascending. Entries inside the
    /// pseudo-inverse cutoff are treated as zero in the quadratic form.
    pub var_diff_eigs: Vec<f64>,
}

/// Hausman statistic
/// H = (b_RE - b_FE)' [Var(FE) - Var(RE)]^- (b_RE - b_FE)
/// over the slope coefficients common to both fits. The generalized
/// inverse keeps every eigenvalue above the cutoff, so a mildly
/// indefinite finite-sample difference matrix is inverted as-is; the
/// statistic is reported in absolute value and df is the retained rank.
pub fn hausman_test(fe: &FitResult, re: &FitResult) -> Result<HausmanResult> {
    let common: Vec<(usize, usize, String)> = fe
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            if l == "(Intercept)" {
                return None;
            }
            re.labels
                .iter()
                .position(|rl| rl == l)
                .map(|j| (i, j, l.clone()))
        })
        .collect();
    if common.is_empty() {
        return Err(Error::EmptyComparison(
            "the FE and RE fits share no slope coefficients".into(),
        ));
    }
    let k = common.len();
    let d = DVector::from_iterator(
        k,
        common.iter().map(|&(i, j, _)| re.beta[j] - fe.beta[i]),
    );
    let mut vdiff = DMatrix::zeros(k, k);
    for (a, &(ia, ja, _)) in common.iter().enumerate() {
        for (b, &(ib, jb, _)) in common.iter().enumerate() {
            vdiff[(a, b)] = fe.var_beta[(ia, ib)] - re.var_beta[(ja, jb)];
        }
    }
    let sym = (&vdiff + vdiff.transpose()) * 0.5;
    let mut eigs: Vec<f64> = sym.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (vinv, rank) = pseudo_inverse(&sym, PINV_TOL);
    let statistic = (d.transpose() * &vinv * &d)[(0, 0)].abs();
    let p_value = chi_squared_sf(statistic, rank);
    Ok(HausmanResult {
        statistic,
        df: rank,
        p_value,
        coef_diffs: common
            .iter()
            .map(|&(i, j, ref l)| (l.clone(), re.beta[j] - fe.beta[i]))
            .collect(),
        var_diff_eigs: eigs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceBackend {
    SwamyArora,
    Reml,
}

impl VarianceBackend {
    pub fn estimate(&self, bundle: &DesignBundle) -> Result<VarianceEstimate> {
        match self {
            VarianceBackend::SwamyArora => estimate_swamy_arora(bundle),
            VarianceBackend::Reml => estimate_reml(bundle),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreResult {
    /// Coefficients on the retained group-mean terms.
    pub gamma: Vec<(String, f64)>,
    pub wald: f64,
    pub df: usize,
    pub p_value: f64,
    /// Time-invariant regressors whose mean terms were dropped.
    pub dropped: Vec<String>,
}

/// Mundlak-Wooldridge CRE test: augments X with the per-unit means of
/// every time-varying slope column, refits the RE model (re-estimating
/// the variance components on the augmented model), and Wald-tests the
/// mean-term coefficients against zero.
pub fn cre_mundlak_test(bundle: &DesignBundle, backend: VarianceBackend) -> Result<CreResult> {
    let slope_cols = bundle.slope_cols();
    let n = bundle.n();
    let scale = bundle
        .x
        .iter()
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1.0);

    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<String> = Vec::new();
    for &col in &slope_cols {
        let (expanded, _) = bundle.group_means_of_col(col);
        let within_dev = bundle.x.column(col) - &expanded;
        if within_dev.amax() > 1e-10 * scale {
            kept.push(col);
        } else {
            dropped.push(bundle.labels_x[col].clone());
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyComparison(
            "every group-mean term is collinear (no time-varying regressor)".into(),
        ));
    }

    let p = bundle.p();
    let p_aug = p + kept.len();
    let mut x_aug = DMatrix::zeros(n, p_aug);
    x_aug.view_mut((0, 0), (n, p)).copy_from(&bundle.x);
    let mut labels = bundle.labels_x.clone();
    for (c, &col) in kept.iter().enumerate() {
        let (expanded, _) = bundle.group_means_of_col(col);
        x_aug.set_column(p + c, &expanded);
        labels.push(format!("mean({})", bundle.labels_x[col]));
    }

    let mut aug = bundle.clone();
    aug.x = x_aug;
    aug.labels_x = labels;

    let variance = backend.estimate(&aug)?;
    let fit = fit_re(&aug, &variance)?;

    let gamma_idx: Vec<usize> = (p..p_aug).collect();
    let gamma = DVector::from_iterator(kept.len(), gamma_idx.iter().map(|&j| fit.beta[j]));
    let mut vg = DMatrix::zeros(kept.len(), kept.len());
    for (a, &ja) in gamma_idx.iter().enumerate() {
        for (b, &jb) in gamma_idx.iter().enumerate() {
            vg[(a, b)] = fit.var_beta[(ja, jb)];
        }
    }
    let (vg_inv, _) = pseudo_inverse(&vg, PINV_TOL);
    let wald = (gamma.transpose() * &vg_inv * &gamma)[(0, 0)].abs();
    let df = kept.len();
    let p_value = chi_squared_sf(wald, df);
    Ok(CreResult {
        gamma: kept
            .iter()
            .zip(gamma.iter())
            .map(|(&col, &g)| (format!("mean({})", bundle.labels_x[col]), g))
            .collect(),
        wald,
        df,
        p_value,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, ModelSpec};
    use crate::estimators::fit_fe_within;
    use crate::testutil::panel_from_rows;

    fn bundle() -> DesignBundle {
        let rows = vec![
            ("a", 1.3, 0.2),
            ("a", 2.1, 0.9),
            ("a", 2.9, 1.8),
            ("b", 0.7, 0.4),
            ("b", 1.9, 1.1),
            ("b", 3.2, 2.4),
            ("c", 2.0, 1.0),
            ("c", 2.6, 1.7),
            ("c", 3.3, 2.9),
        ];
        let data = panel_from_rows(&rows);
        build_design(&data, &ModelSpec::new("y", &["x"], "unit")).unwrap()
    }

    #[test]
    fn identical_fits_give_zero_statistic_and_p_one() {
        let b = bundle();
        let fe = fit_fe_within(&b).unwrap();
        let h = hausman_test(&fe, &fe).unwrap();
        assert_eq!(h.statistic, 0.0);
        assert_eq!(h.p_value, 1.0);
    }

    #[test]
    fn no_common_slopes_is_empty_comparison() {
        let b = bundle();
        let fe = fit_fe_within(&b).unwrap();
        let mut re = fe.clone();
        re.labels = vec!["other".into()];
        let err = hausman_test(&fe, &re).unwrap_err();
        assert!(matches!(err, Error::EmptyComparison(_)), "{err}");
    }

    #[test]
    fn time_invariant_only_model_gives_empty_comparison() {
        let rows = vec![
            ("a", 1.0, 0.5),
            ("a", 2.0, 0.5),
            ("b", 3.0, 1.5),
            ("b", 4.0, 1.5),
            ("c", 2.0, 2.5),
            ("c", 2.5, 2.5),
        ];
        let data = panel_from_rows(&rows);
        let b = build_design(&data, &ModelSpec::new("y", &["x"], "unit")).unwrap();
        let err = cre_mundlak_test(&b, VarianceBackend::SwamyArora).unwrap_err();
        assert!(matches!(err, Error::EmptyComparison(_)), "{err}");
    }
}
