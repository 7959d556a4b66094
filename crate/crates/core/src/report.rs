//! Analysis report: a canonical JSON document with fixed key order
//! plus the human-readable rendering. Every number in the printed
//! tables is a rounded view of a full-precision JSON field.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bias::BiasDiagnosticResult;
use crate::error::{Error, Result};
use crate::spectests::{CreResult, HausmanResult};
use crate::variance::VarianceEstimate;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelEcho {
    pub response: String,
    pub fixed_terms: Vec<String>,
    pub intercept: bool,
    pub group_column: String,
    pub variance_backend: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub tool_version: String,
    pub seed: Option<u64>,
    pub n_permutations: Option<usize>,
    pub inputs: Vec<InputDigest>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub estimator: String,
    pub labels: Vec<String>,
    pub estimates: Vec<f64>,
    pub std_errors: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub fe: Option<f64>,
    pub re: Option<f64>,
    pub re_minus_fe: Option<f64>,
    pub bias_estimate: Option<f64>,
    pub bias_p_value: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub method: String,
    pub sigma2_eta: Vec<(String, f64)>,
    pub sigma2_eps: f64,
    pub reml_loglik: Option<f64>,
    pub boundary: bool,
}

impl VarianceReport {
    pub fn from_estimate(est: &VarianceEstimate) -> Self {
        VarianceReport {
            method: format!("{:?}", est.method),
            sigma2_eta: est.sigma2_eta.clone(),
            sigma2_eps: est.sigma2_eps,
            reml_loglik: est.reml_loglik,
            boundary: est.boundary_flag,
        }
    }
}

/// Top-level report for any of the CLI commands. Unused sections stay
/// absent so the same schema serves fit, hausman, and biastest runs.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AnalysisReport {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelEcho>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub variance: Vec<VarianceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fe_within: Option<CoefficientTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fe_lsdv: Option<CoefficientTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub re_gls: Option<CoefficientTable>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub comparison: Vec<ComparisonRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hausman: Option<HausmanResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cre: Option<CreResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasDiagnosticResult>,
    pub provenance: Provenance,
}

impl Default for Provenance {
    fn default() -> Self {
        Provenance {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            n_permutations: None,
            inputs: Vec::new(),
        }
    }
}

impl AnalysisReport {
    /// Canonical JSON: fixed key order (struct order), full float
    /// precision via the shortest round-trip representation.
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Numerical(format!("report serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("report parse failed: {e}")))
    }
}

/// SHA-256 digest of a file, hex encoded.
pub fn file_digest<P: AsRef<Path>>(path: P) -> Result<InputDigest> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::Io {
        path: path.as_ref().display().to_string(),
        source: e,
    })?;
    let hash = Sha256::digest(&bytes);
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    Ok(InputDigest {
        path: path.as_ref().display().to_string(),
        sha256: hex,
    })
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:>12.4}"),
        None => format!("{:>12}", "-"),
    }
}

/// Renders the FE/RE comparison in the layout of the gasoline table:
/// parameter, FE, RE, RE - FE, bias estimate, bias p-value.
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>12} {:>12} {:>12} {:>14} {:>12}",
        "Parameter", "FE Est", "RE Est", "(RE - FE)", "Bias Estimate", "Bias p-value"
    );
    for row in rows {
        let _ = writeln!(
            out,
            "{:<14} {} {} {} {:>14} {}",
            row.label,
            fmt_cell(row.fe),
            fmt_cell(row.re),
            fmt_cell(row.re_minus_fe),
            match row.bias_estimate {
                Some(v) => format!("{v:>14.4}"),
                None => format!("{:>14}", "-"),
            },
            fmt_cell(row.bias_p_value),
        );
    }
    out
}

pub fn render_coefficients(table: &CoefficientTable) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} coefficients:", table.estimator);
    let _ = writeln!(
        out,
        "{:<14} {:>12} {:>12}",
        "Parameter", "Estimate", "Std. Error"
    );
    for (i, label) in table.labels.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<14} {:>12.4} {:>12.4}",
            label, table.estimates[i], table.std_errors[i]
        );
    }
    out
}

pub fn render_variance(v: &VarianceReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Variance components ({}):", v.method);
    for (label, value) in &v.sigma2_eta {
        let _ = writeln!(out, "  sigma2_eta[{label}] = {value:.6}");
    }
    let _ = writeln!(out, "  sigma2_eps        = {:.6}", v.sigma2_eps);
    if let Some(ll) = v.reml_loglik {
        let _ = writeln!(out, "  REML log-likelihood = {ll:.4}");
    }
    if v.boundary {
        let _ = writeln!(out, "  note: a variance component was clamped to zero");
    }
    out
}

/// Mirrors the classical test printout:
/// "chisq = ..., df = ..., p-value ...".
pub fn render_hausman(h: &HausmanResult) -> String {
    format!(
        "Hausman Test\nchisq = {:.4}, df = {}, p-value {}\n",
        h.statistic,
        h.df,
        format_p(h.p_value)
    )
}

pub fn render_cre(c: &CreResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "CRE (Mundlak) Wald Test");
    let _ = writeln!(
        out,
        "wald = {:.4}, df = {}, p-value {}",
        c.wald,
        c.df,
        format_p(c.p_value)
    );
    for (label, g) in &c.gamma {
        let _ = writeln!(out, "  {label} = {g:.4}");
    }
    if !c.dropped.is_empty() {
        let _ = writeln!(
            out,
            "  dropped time-invariant mean terms: {}",
            c.dropped.join(", ")
        );
    }
    out
}

pub fn format_p(p: f64) -> String {
    if p < 2.2e-16 {
        "< 2.2e-16".to_string()
    } else {
        format!("= {p:.4e}")
    }
}
