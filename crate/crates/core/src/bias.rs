//! Internal bias diagnostic for mixed-model fixed effects: the plug-in
//! estimate nu_k' eta_hat with
//!
//!   nu_k = k' (X'V^-1X)^- X'V^-1 Z
//!
//! and a permutation p-value obtained by shuffling the EBLUPs within
//! the variance blocks implied by G. Permutations are drawn from
//! counter-based seeded streams (one stream per permutation index, one
//! stream family per k-vector), so results are bit-identical for any
//! degree of parallelism.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::DesignBundle;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, FitResult};
use crate::external::ExternalFit;
use crate::gls::{gls_cross_products, pseudo_inverse, VSolver, PINV_TOL};

/// Number of histogram bins for permutation reference distributions.
pub const HISTOGRAM_BINS: usize = 81;

/// Exhaustive enumeration replaces Monte Carlo whenever the total
/// number of within-block permutations is at most 8!.
pub const EXHAUSTIVE_LIMIT: u64 = 40_320;

const ESTIMABILITY_TOL: f64 = 1e-8;

/// A linear combination k'beta of the fixed effects.
#[derive(Debug, Clone)]
pub struct KVector {
    pub label: String,
    pub k: DVector<f64>,
    pub estimable: bool,
}

impl KVector {
    /// Builds a k-vector and checks estimability: k must lie in the row
    /// space of X, measured by the projection residual.
    pub fn new(label: impl Into<String>, k: DVector<f64>, x: &DMatrix<f64>) -> Result<Self> {
        if k.len() != x.ncols() {
            return Err(Error::Dimension(format!(
                "k has {} entries but X has {} columns",
                k.len(),
                x.ncols()
            )));
        }
        let xtx = x.transpose() * x;
        let (xtx_pinv, _) = pseudo_inverse(&xtx, PINV_TOL);
        let projected = &xtx_pinv * (&xtx * &k);
        let resid = (&k - &projected).norm();
        let estimable = resid <= ESTIMABILITY_TOL * k.norm().max(1.0);
        Ok(KVector {
            label: label.into(),
            k,
            estimable,
        })
    }

    /// The j-th unit vector, labeled by the corresponding X column.
    pub fn unit(j: usize, labels_x: &[String], x: &DMatrix<f64>) -> Result<Self> {
        let mut k = DVector::zeros(x.ncols());
        k[j] = 1.0;
        KVector::new(labels_x[j].clone(), k, x)
    }
}

/// Within-block permutation plan for the EBLUPs.
#[derive(Debug, Clone)]
pub struct PermutationPlan {
    m: usize,
    blocks: Vec<Vec<usize>>,
    pub n_permutations: usize,
    pub seed: u64,
    /// Skip the automatic switch to exhaustive enumeration; used to
    /// cross-check the two modes against each other.
    pub force_monte_carlo: bool,
}

impl PermutationPlan {
    pub fn new(blocks: Vec<Vec<usize>>, n_permutations: usize, seed: u64) -> Result<Self> {
        let m: usize = blocks.iter().map(Vec::len).sum();
        let mut covered = vec![false; m];
        for block in &blocks {
            for &j in block {
                if j >= m || covered[j] {
                    return Err(Error::Validity(format!(
                        "permutation blocks must partition 0..{m}; index {j} is repeated \
                         or out of range"
                    )));
                }
                covered[j] = true;
            }
        }
        if n_permutations == 0 {
            return Err(Error::Parameter(
                "n_permutations must be at least 1".into(),
            ));
        }
        Ok(PermutationPlan {
            m,
            blocks,
            n_permutations,
            seed,
            force_monte_carlo: false,
        })
    }

    /// Single block over m effects.
    pub fn single_block(m: usize, n_permutations: usize, seed: u64) -> Result<Self> {
        PermutationPlan::new(vec![(0..m).collect()], n_permutations, seed)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    /// Total number of distinct within-block permutations, saturating.
    pub fn total_permutations(&self) -> u64 {
        let mut total: u64 = 1;
        for block in &self.blocks {
            for f in 2..=block.len() as u64 {
                total = total.saturating_mul(f);
            }
        }
        total
    }

    /// Draws the permutation for a given stream index: position i takes
    /// the value originally at `perm[i]`, and `perm[i]` stays inside the
    /// block of i.
    pub fn sample(&self, stream: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let mut perm: Vec<usize> = (0..self.m).collect();
        for block in &self.blocks {
            let mut values: Vec<usize> = block.clone();
            values.shuffle(&mut rng);
            for (&pos, &val) in block.iter().zip(values.iter()) {
                perm[pos] = val;
            }
        }
        perm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PermutationMode {
    Exhaustive,
    MonteCarlo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PermQuantiles {
    pub min: f64,
    pub p01: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p99: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramData {
    /// `HISTOGRAM_BINS + 1` bin edges spanning the permuted range.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Diagnostic outcome for one k-vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasEntry {
    pub label: String,
    pub k: Vec<f64>,
    pub nu_hat: Vec<f64>,
    pub observed: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub mode: PermutationMode,
    pub quantiles: PermQuantiles,
    pub histogram: HistogramData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasDiagnosticResult {
    pub entries: Vec<BiasEntry>,
    pub seed: u64,
    pub n_permutations_requested: usize,
}

/// Everything the diagnostic needs from a fitted model, native or
/// external: the p x m matrix whose rows are nu_k for unit k-vectors,
/// the EBLUPs, and the permutation blocks.
pub struct DiagnosticSource {
    pub nu_all: DMatrix<f64>,
    pub eta: DVector<f64>,
    pub blocks: Vec<Vec<usize>>,
    pub labels_x: Vec<String>,
    pub x: DMatrix<f64>,
}

impl DiagnosticSource {
    /// From a native RE fit. EBLUPs must already be computed.
    pub fn from_re_fit(fit: &FitResult, bundle: &DesignBundle) -> Result<Self> {
        if fit.estimator != EstimatorKind::ReGls {
            return Err(Error::Parameter(
                "the bias diagnostic needs an RE-GLS fit".into(),
            ));
        }
        let solver = fit
            .solver
            .as_ref()
            .ok_or_else(|| Error::Parameter("RE fit is missing its solver handle".into()))?;
        let eta = fit.eta.clone().ok_or_else(|| {
            Error::Parameter("EBLUPs are missing; run compute_eblups on the fit first".into())
        })?;
        let (xtvix, _, xtviz) = gls_cross_products(solver, &bundle.x, &bundle.y)?;
        let (a, _) = pseudo_inverse(&xtvix, PINV_TOL);
        let nu_all = &a * &xtviz;
        Ok(DiagnosticSource {
            nu_all,
            eta,
            blocks: bundle
                .g_structure
                .iter()
                .map(|(_, members)| members.clone())
                .collect(),
            labels_x: bundle.labels_x.clone(),
            x: bundle.x.clone(),
        })
    }

    /// From an imported fit: V is rebuilt from (Z, G, R) and the
    /// supplied EBLUPs are used as-is.
    pub fn from_external(fit: &ExternalFit) -> Result<Self> {
        fit.validate()?;
        let solver = VSolver::new(&fit.z, &fit.g_diag, &fit.r)?;
        let (xtvix, _, xtviz) = gls_cross_products(&solver, &fit.x, &fit.y)?;
        let (a, _) = pseudo_inverse(&xtvix, PINV_TOL);
        let nu_all = &a * &xtviz;
        Ok(DiagnosticSource {
            nu_all,
            eta: fit.eta_hat.clone(),
            blocks: fit.permutation_blocks.clone(),
            labels_x: fit.labels_x.clone(),
            x: fit.x.clone(),
        })
    }

    pub fn m(&self) -> usize {
        self.nu_all.ncols()
    }

    pub fn p(&self) -> usize {
        self.nu_all.nrows()
    }

    /// Default k-set: one unit vector per fixed effect.
    pub fn unit_k_set(&self) -> Result<Vec<KVector>> {
        (0..self.p())
            .map(|j| KVector::unit(j, &self.labels_x, &self.x))
            .collect()
    }
}

/// nu_k = k' (X'V^-1X)^- X'V^-1 Z for one estimable k.
pub fn compute_nu_hat(source: &DiagnosticSource, k: &KVector) -> Result<DVector<f64>> {
    if k.k.len() != source.p() {
        return Err(Error::Dimension(format!(
            "k has {} entries but the fit has {} fixed effects",
            k.k.len(),
            source.p()
        )));
    }
    if !k.estimable {
        return Err(Error::Estimability(format!(
            "k'beta is not estimable for '{}': k lies outside the row space of X",
            k.label
        )));
    }
    Ok(source.nu_all.transpose() * &k.k)
}

/// Inner product nu_k' eta_hat.
pub fn bias_estimate(nu_hat: &DVector<f64>, eta_hat: &DVector<f64>) -> Result<f64> {
    if nu_hat.len() != eta_hat.len() {
        return Err(Error::Dimension(format!(
            "nu has {} entries but eta has {}",
            nu_hat.len(),
            eta_hat.len()
        )));
    }
    Ok(nu_hat.dot(eta_hat))
}

fn type7_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn summarize(stats: &[f64], observed: f64) -> (f64, PermQuantiles, HistogramData) {
    let n = stats.len();
    let count = stats.iter().filter(|s| s.abs() >= observed.abs()).count();
    let p_value = count as f64 / n as f64;

    let mut sorted = stats.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantiles = PermQuantiles {
        min: sorted[0],
        p01: type7_quantile(&sorted, 0.01),
        p25: type7_quantile(&sorted, 0.25),
        p50: type7_quantile(&sorted, 0.50),
        p75: type7_quantile(&sorted, 0.75),
        p99: type7_quantile(&sorted, 0.99),
        max: sorted[n - 1],
    };

    let (mut lo, mut hi) = (sorted[0], sorted[n - 1]);
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let mut edges = Vec::with_capacity(HISTOGRAM_BINS + 1);
    for i in 0..=HISTOGRAM_BINS {
        edges.push(lo + width * i as f64);
    }
    edges[HISTOGRAM_BINS] = hi;
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &s in stats {
        let idx = (((s - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[idx] += 1;
    }
    (p_value, quantiles, HistogramData { edges, counts })
}

fn block_permutations(block: &[usize]) -> Vec<Vec<usize>> {
    // Heap's algorithm
    let mut out = Vec::new();
    let mut a = block.to_vec();
    let n = a.len();
    let mut c = vec![0usize; n];
    out.push(a.clone());
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

fn exhaustive_stats(nu: &DVector<f64>, eta: &DVector<f64>, plan: &PermutationPlan) -> Vec<f64> {
    let per_block: Vec<Vec<Vec<usize>>> = plan
        .blocks()
        .iter()
        .map(|b| block_permutations(b))
        .collect();
    let mut stats = Vec::with_capacity(plan.total_permutations() as usize);
    let mut counters = vec![0usize; per_block.len()];
    loop {
        let mut s = 0.0;
        for (bi, block) in plan.blocks().iter().enumerate() {
            let values = &per_block[bi][counters[bi]];
            for (&pos, &val) in block.iter().zip(values.iter()) {
                s += nu[pos] * eta[val];
            }
        }
        stats.push(s);
        // advance the mixed-radix counter
        let mut carry = true;
        for (c, perms) in counters.iter_mut().zip(per_block.iter()) {
            if carry {
                *c += 1;
                if *c == perms.len() {
                    *c = 0;
                } else {
                    carry = false;
                }
            }
        }
        if carry {
            break;
        }
    }
    stats
}

fn monte_carlo_stats(
    nu: &DVector<f64>,
    eta: &DVector<f64>,
    plan: &PermutationPlan,
    stream_base: u64,
) -> Vec<f64> {
    (0..plan.n_permutations as u64)
        .into_par_iter()
        .map(|b| {
            let perm = plan.sample(stream_base | b);
            perm.iter()
                .enumerate()
                .map(|(pos, &val)| nu[pos] * eta[val])
                .sum()
        })
        .collect()
}

fn pvalue_with_stream(
    nu: &DVector<f64>,
    eta: &DVector<f64>,
    plan: &PermutationPlan,
    label: &str,
    k: Vec<f64>,
    stream_base: u64,
) -> Result<BiasEntry> {
    if nu.len() != plan.m() || eta.len() != plan.m() {
        return Err(Error::Dimension(format!(
            "nu has {} entries, eta has {}, plan covers {} effects",
            nu.len(),
            eta.len(),
            plan.m()
        )));
    }
    let observed = bias_estimate(nu, eta)?;
    let total = plan.total_permutations();
    let (stats, mode) = if !plan.force_monte_carlo && total <= EXHAUSTIVE_LIMIT {
        (exhaustive_stats(nu, eta, plan), PermutationMode::Exhaustive)
    } else {
        (
            monte_carlo_stats(nu, eta, plan, stream_base),
            PermutationMode::MonteCarlo,
        )
    };
    let (p_value, quantiles, histogram) = summarize(&stats, observed);
    Ok(BiasEntry {
        label: label.to_string(),
        k,
        nu_hat: nu.iter().copied().collect(),
        observed,
        p_value,
        n_permutations: stats.len(),
        mode,
        quantiles,
        histogram,
    })
}

/// Permutation p-value for one nu/eta pair: the proportion of permuted
/// statistics whose absolute magnitude reaches the observed one
/// (non-strict comparison, no add-one smoothing).
pub fn permutation_pvalue(
    nu_hat: &DVector<f64>,
    eta_hat: &DVector<f64>,
    plan: &PermutationPlan,
) -> Result<BiasEntry> {
    pvalue_with_stream(nu_hat, eta_hat, plan, "k", nu_hat.iter().copied().collect(), 0)
}

/// Runs the diagnostic for a set of k-vectors (all unit vectors when
/// empty), one permutation-stream family per k under a shared master
/// seed.
pub fn run_bias_diagnostic(
    source: &DiagnosticSource,
    k_set: &[KVector],
    plan: &PermutationPlan,
) -> Result<BiasDiagnosticResult> {
    let k_set: Vec<KVector> = if k_set.is_empty() {
        source.unit_k_set()?
    } else {
        k_set.to_vec()
    };
    let inestimable: Vec<String> = k_set
        .iter()
        .filter(|k| !k.estimable)
        .map(|k| k.label.clone())
        .collect();
    if !inestimable.is_empty() {
        return Err(Error::Estimability(format!(
            "inestimable k-vectors: {}",
            inestimable.join(", ")
        )));
    }
    let mut entries = Vec::with_capacity(k_set.len());
    for (kidx, k) in k_set.iter().enumerate() {
        let nu = compute_nu_hat(source, k)?;
        let entry = pvalue_with_stream(
            &nu,
            &source.eta,
            plan,
            &k.label,
            k.k.iter().copied().collect(),
            (kidx as u64) << 40,
        )?;
        entries.push(entry);
    }
    Ok(BiasDiagnosticResult {
        entries,
        seed: plan.seed,
        n_permutations_requested: plan.n_permutations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_observed_gives_p_one() {
        let nu = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let eta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let plan = PermutationPlan::single_block(3, 100, 7).unwrap();
        let entry = permutation_pvalue(&nu, &eta, &plan).unwrap();
        assert_eq!(entry.observed, 0.0);
        assert_eq!(entry.p_value, 1.0);
    }

    #[test]
    fn zero_eta_gives_zero_estimate() {
        let nu = DVector::from_vec(vec![1.0, 2.0]);
        let eta = DVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(bias_estimate(&nu, &eta).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let nu = DVector::from_vec(vec![1.0, 2.0]);
        let eta = DVector::from_vec(vec![0.0]);
        assert!(bias_estimate(&nu, &eta).is_err());
    }

    #[test]
    fn zero_permutations_is_a_parameter_error() {
        let err = PermutationPlan::single_block(3, 0, 7).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)), "{err}");
    }

    #[test]
    fn small_cases_switch_to_exhaustive() {
        let nu = DVector::from_vec(vec![0.3, -0.7, 0.2, 0.9]);
        let eta = DVector::from_vec(vec![0.11, -0.25, 0.4, -0.05]);
        let plan = PermutationPlan::single_block(4, 1_000_000, 42).unwrap();
        let entry = permutation_pvalue(&nu, &eta, &plan).unwrap();
        assert_eq!(entry.mode, PermutationMode::Exhaustive);
        assert_eq!(entry.n_permutations, 24);
    }

    #[test]
    fn exhaustive_is_exact_for_single_block_m4() {
        // independent full-enumeration oracle via index recursion
        let nu = DVector::from_vec(vec![0.3, -0.7, 0.2, 0.9]);
        let eta = DVector::from_vec(vec![0.11, -0.25, 0.4, -0.05]);
        let observed = nu.dot(&eta);
        let mut count = 0usize;
        let mut total = 0usize;
        let idx = [0usize, 1, 2, 3];
        let mut perm = idx;
        // enumerate all 24 permutations of 4 indices
        fn heap(a: &mut [usize; 4], k: usize, f: &mut impl FnMut(&[usize; 4])) {
            if k == 1 {
                f(a);
                return;
            }
            for i in 0..k {
                heap(a, k - 1, f);
                if i < k - 1 {
                    if k.is_multiple_of(2) {
                        a.swap(i, k - 1);
                    } else {
                        a.swap(0, k - 1);
                    }
                }
            }
        }
        heap(&mut perm, 4, &mut |p| {
            let s: f64 = (0..4).map(|i| nu[i] * eta[p[i]]).sum();
            total += 1;
            if s.abs() >= observed.abs() {
                count += 1;
            }
        });
        assert_eq!(total, 24);
        let plan = PermutationPlan::single_block(4, 10, 42).unwrap();
        let entry = permutation_pvalue(&nu, &eta, &plan).unwrap();
        assert_relative_eq!(entry.p_value, count as f64 / 24.0, epsilon = 1e-15);
    }

    #[test]
    fn sample_keeps_values_within_blocks() {
        let plan = PermutationPlan::new(vec![vec![0, 1, 2], vec![3, 4]], 10, 99).unwrap();
        for b in 0..200 {
            let perm = plan.sample(b);
            for (i, &v) in perm.iter().enumerate() {
                if i < 3 {
                    assert!(v < 3);
                } else {
                    assert!(v >= 3);
                }
            }
        }
    }

    #[test]
    fn identical_seeds_reproduce_statistics() {
        let nu = DVector::from_vec(vec![0.3, -0.7, 0.2, 0.9, 1.1]);
        let eta = DVector::from_vec(vec![0.11, -0.25, 0.4, -0.05, 0.3]);
        let mut plan = PermutationPlan::single_block(5, 500, 2024).unwrap();
        plan.force_monte_carlo = true;
        let a = permutation_pvalue(&nu, &eta, &plan).unwrap();
        let b = permutation_pvalue(&nu, &eta, &plan).unwrap();
        assert_eq!(a.p_value, b.p_value);
        assert_eq!(a.histogram.counts, b.histogram.counts);
    }
}
