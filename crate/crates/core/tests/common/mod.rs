#![allow(dead_code)]

//! Shared helpers for the integration tests.

pub mod vam;

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use panelspec_core::data::{load_panel_csv, ColumnDecl, PanelDataset};
use panelspec_core::design::{build_design, DesignBundle, ModelSpec};

pub fn gasoline_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/gasoline.csv")
}

pub fn load_gasoline() -> PanelDataset {
    load_panel_csv(
        gasoline_path(),
        &ColumnDecl {
            unit: "country".into(),
            time: Some("year".into()),
            numeric: None,
        },
    )
    .expect("gasoline.csv loads")
}

pub fn gasoline_bundle() -> DesignBundle {
    let data = load_gasoline();
    let spec = ModelSpec::new("lgaspcar", &["lincomep", "lrpmg", "lcarpcap"], "country");
    build_design(&data, &spec).expect("gasoline design builds")
}

/// Dense V = Z diag(g) Z' + scale I, for oracles.
pub fn dense_v(z: &DMatrix<f64>, g: &DVector<f64>, scale: f64) -> DMatrix<f64> {
    let n = z.nrows();
    let mut v = DMatrix::zeros(n, n);
    for k in 0..z.ncols() {
        for i in 0..n {
            for j in 0..n {
                v[(i, j)] += z[(i, k)] * g[k] * z[(j, k)];
            }
        }
    }
    for i in 0..n {
        v[(i, i)] += scale;
    }
    v
}

/// Simple deterministic congruential generator for oracle fixtures, so
/// the tests do not depend on the crate's own RNG choices.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0
    }

    /// Uniform in (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
