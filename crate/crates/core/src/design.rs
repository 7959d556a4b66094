//! Builds fixed- and random-effects design matrices from a panel
//! dataset and a model specification.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::data::PanelDataset;
use crate::error::{Error, Result};
use crate::gls::PINV_TOL;
use crate::sparse::SparseMat;

/// Error covariance structure carried by a design (values filled in at
/// fit time for the scaled-identity case).
#[derive(Debug, Clone)]
pub enum RStructureSpec {
    ScaledIdentity,
    /// Explicit blocks: (row indices, block matrix).
    BlockDiagonal(Vec<(Vec<usize>, DMatrix<f64>)>),
}

/// Model specification over a `PanelDataset`.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub response: String,
    pub fixed_terms: Vec<String>,
    pub intercept: bool,
    pub group_column: String,
    /// Optional map from group level to variance-block label. Absent
    /// means a single block named after the group column.
    pub variance_blocks: Option<HashMap<String, String>>,
}

impl ModelSpec {
    pub fn new(response: &str, fixed_terms: &[&str], group_column: &str) -> Self {
        ModelSpec {
            response: response.to_string(),
            fixed_terms: fixed_terms.iter().map(|s| s.to_string()).collect(),
            intercept: true,
            group_column: group_column.to_string(),
            variance_blocks: None,
        }
    }
}

/// Design matrices and grouping structure for one model.
#[derive(Debug, Clone)]
pub struct DesignBundle {
    pub x: DMatrix<f64>,
    pub z: SparseMat,
    pub y: DVector<f64>,
    pub group_of_row: Vec<usize>,
    /// Variance blocks: (label, member columns of Z). Partitions 0..m.
    pub g_structure: Vec<(String, Vec<usize>)>,
    pub r_structure: RStructureSpec,
    pub labels_x: Vec<String>,
    pub labels_z: Vec<String>,
    pub intercept: bool,
    /// Set when X is rank deficient; GLS then runs through the
    /// generalized inverse.
    pub rank_warning: Option<String>,
    /// Groups with a single observation, flagged for FE paths.
    pub singleton_groups: Vec<usize>,
}

impl DesignBundle {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.z.ncols()
    }

    /// Indices of slope columns in X (everything but the intercept).
    pub fn slope_cols(&self) -> Vec<usize> {
        let start = usize::from(self.intercept);
        (start..self.p()).collect()
    }

    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.m()];
        for &g in &self.group_of_row {
            counts[g] += 1;
        }
        counts
    }

    /// Per-group means of an X column, expanded to row length.
    pub fn group_means_of_col(&self, col: usize) -> (DVector<f64>, Vec<f64>) {
        let counts = self.group_counts();
        let mut means = vec![0.0; self.m()];
        for (i, &g) in self.group_of_row.iter().enumerate() {
            means[g] += self.x[(i, col)];
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            *m /= *c as f64;
        }
        let expanded =
            DVector::from_iterator(self.n(), self.group_of_row.iter().map(|&g| means[g]));
        (expanded, means)
    }
}

/// Builds X (intercept first, then fixed terms in order, categorical
/// terms expanded with the first level as reference), the unit
/// incidence Z, and the variance-block structure.
pub fn build_design(data: &PanelDataset, spec: &ModelSpec) -> Result<DesignBundle> {
    if spec.group_column != data.unit_col {
        return Err(Error::Schema(format!(
            "group column '{}' does not match the dataset unit column '{}'",
            spec.group_column, data.unit_col
        )));
    }
    let y_col = data
        .column(&spec.response)
        .ok_or_else(|| Error::Schema(format!("response column '{}' not found", spec.response)))?;
    let n = data.n_rows();
    let y = DVector::from_column_slice(y_col);

    let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
    if spec.intercept {
        cols.push(("(Intercept)".to_string(), vec![1.0; n]));
    }
    for term in &spec.fixed_terms {
        if term == &data.unit_col {
            return Err(Error::Schema(format!(
                "'{term}' is the grouping column; unit indicators enter through the \
                 fixed-effects estimators, not the fixed terms"
            )));
        }
        if term == &data.time_col {
            // categorical expansion, first level as reference
            for (lvl_idx, lvl) in data.times.iter().enumerate().skip(1) {
                let col: Vec<f64> = data
                    .time_of_row
                    .iter()
                    .map(|&t| if t == lvl_idx { 1.0 } else { 0.0 })
                    .collect();
                cols.push((format!("{term}={lvl}"), col));
            }
            continue;
        }
        let v = data
            .column(term)
            .ok_or_else(|| Error::Schema(format!("fixed term '{term}' not found")))?;
        cols.push((term.clone(), v.to_vec()));
    }
    if cols.is_empty() {
        return Err(Error::Schema("model has no fixed-effect columns".into()));
    }

    let p = cols.len();
    let mut x = DMatrix::zeros(n, p);
    for (j, (_, v)) in cols.iter().enumerate() {
        for (i, &val) in v.iter().enumerate() {
            x[(i, j)] = val;
        }
    }
    let labels_x: Vec<String> = cols.into_iter().map(|(name, _)| name).collect();

    let m = data.n_units();
    let z = SparseMat::incidence(&data.unit_of_row, m);

    let g_structure = match &spec.variance_blocks {
        None => vec![(spec.group_column.clone(), (0..m).collect())],
        Some(map) => {
            let mut by_label: Vec<(String, Vec<usize>)> = Vec::new();
            for (j, unit) in data.units.iter().enumerate() {
                let label = map.get(unit).ok_or_else(|| {
                    Error::Schema(format!(
                        "variance_blocks does not assign group level '{unit}'"
                    ))
                })?;
                match by_label.iter_mut().find(|(l, _)| l == label) {
                    Some((_, members)) => members.push(j),
                    None => by_label.push((label.clone(), vec![j])),
                }
            }
            by_label
        }
    };

    // rank check on X'X; deficiency is a warning, not an error
    let xtx = x.transpose() * &x;
    let (_, rank) = crate::gls::pseudo_inverse(&xtx, PINV_TOL);
    let rank_warning = if rank < p {
        Some(format!(
            "X is rank deficient (rank {rank} < {p} columns); GLS uses a generalized inverse"
        ))
    } else {
        None
    };

    let counts = {
        let mut c = vec![0usize; m];
        for &g in &data.unit_of_row {
            c[g] += 1;
        }
        c
    };
    let singleton_groups = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 1)
        .map(|(j, _)| j)
        .collect();

    Ok(DesignBundle {
        x,
        z,
        y,
        group_of_row: data.unit_of_row.clone(),
        g_structure,
        r_structure: RStructureSpec::ScaledIdentity,
        labels_x,
        labels_z: data.units.clone(),
        intercept: spec.intercept,
        rank_warning,
        singleton_groups,
    })
}
