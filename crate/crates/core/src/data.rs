//! Panel data ingestion: long-format CSV with one categorical unit
//! column, an optional categorical time column, and numeric columns.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Declares how CSV columns map onto the panel layout.
#[derive(Debug, Clone)]
pub struct ColumnDecl {
    /// Column holding the panel unit (group) identifier.
    pub unit: String,
    /// Column holding the time identifier. When absent, a synthetic
    /// within-unit occurrence index is used.
    pub time: Option<String>,
    /// Numeric columns to ingest. `None` ingests every remaining column.
    pub numeric: Option<Vec<String>>,
}

/// Tidy long-format panel: categorical unit/time indices plus named
/// numeric columns, all in file row order.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub unit_col: String,
    pub time_col: String,
    /// Unit labels in first-appearance order.
    pub units: Vec<String>,
    /// Time labels in first-appearance order.
    pub times: Vec<String>,
    pub unit_of_row: Vec<usize>,
    pub time_of_row: Vec<usize>,
    /// Numeric columns, in declaration order.
    pub columns: Vec<(String, Vec<f64>)>,
}

impl PanelDataset {
    pub fn n_rows(&self) -> usize {
        self.unit_of_row.len()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn column_names(&self) -> Vec<&str> {
        self.columns.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Rows per unit, indexed like `units`.
    pub fn unit_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.units.len()];
        for &u in &self.unit_of_row {
            counts[u] += 1;
        }
        counts
    }

    fn validate(&self) -> Result<()> {
        let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
        for (row, key) in self
            .unit_of_row
            .iter()
            .zip(self.time_of_row.iter())
            .enumerate()
        {
            let key = (*key.0, *key.1);
            if let Some(prev) = seen.insert(key, row) {
                return Err(Error::DuplicateKey(format!(
                    "rows {} and {} share (unit, time) = ({}, {})",
                    prev + 1,
                    row + 1,
                    self.units[key.0],
                    self.times[key.1]
                )));
            }
        }
        Ok(())
    }
}

/// Loads a long-format panel CSV. Categorical levels are assigned in
/// first-appearance order; row order is preserved.
pub fn load_panel_csv<P: AsRef<Path>>(path: P, decl: &ColumnDecl) -> Result<PanelDataset> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path_str.clone(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => Error::Parse(format!("{path_str}: {e}")),
        })?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{path_str}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in {path_str}")))
    };

    let unit_idx = col_index(&decl.unit)?;
    let time_idx = match &decl.time {
        Some(t) => Some(col_index(t)?),
        None => None,
    };
    let numeric_names: Vec<String> = match &decl.numeric {
        Some(cols) => {
            for c in cols {
                col_index(c)?;
            }
            cols.clone()
        }
        None => headers
            .iter()
            .filter(|h| {
                **h != decl.unit && decl.time.as_deref() != Some(h.as_str())
            })
            .cloned()
            .collect(),
    };
    let numeric_idx: Vec<usize> = numeric_names
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let mut units: Vec<String> = Vec::new();
    let mut times: Vec<String> = Vec::new();
    let mut unit_ids: HashMap<String, usize> = HashMap::new();
    let mut time_ids: HashMap<String, usize> = HashMap::new();
    let mut unit_of_row = Vec::new();
    let mut time_of_row = Vec::new();
    let mut columns: Vec<(String, Vec<f64>)> = numeric_names
        .iter()
        .map(|n| (n.clone(), Vec::new()))
        .collect();
    let mut per_unit_counter: HashMap<usize, usize> = HashMap::new();

    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::Parse(format!("{path_str} row {}: {e}", row_no + 2))
        })?;
        let unit_label = record.get(unit_idx).unwrap_or("").to_string();
        if unit_label.is_empty() {
            return Err(Error::Parse(format!(
                "{path_str} row {}: empty unit identifier",
                row_no + 2
            )));
        }
        let u = *unit_ids.entry(unit_label.clone()).or_insert_with(|| {
            units.push(unit_label);
            units.len() - 1
        });
        unit_of_row.push(u);

        let time_label = match time_idx {
            Some(ti) => record.get(ti).unwrap_or("").to_string(),
            None => {
                let c = per_unit_counter.entry(u).or_insert(0);
                *c += 1;
                format!("t{c}")
            }
        };
        let t = *time_ids.entry(time_label.clone()).or_insert_with(|| {
            times.push(time_label);
            times.len() - 1
        });
        time_of_row.push(t);

        for (k, &ci) in numeric_idx.iter().enumerate() {
            let raw = record.get(ci).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Parse(format!(
                    "{path_str} row {}: missing value in column '{}'",
                    row_no + 2,
                    numeric_names[k]
                )));
            }
            let v: f64 = raw.parse().map_err(|_| {
                Error::Parse(format!(
                    "{path_str} row {}: non-numeric value '{}' in column '{}'",
                    row_no + 2,
                    raw,
                    numeric_names[k]
                ))
            })?;
            columns[k].1.push(v);
        }
    }

    if unit_of_row.is_empty() {
        return Err(Error::Schema(format!("{path_str}: no data rows")));
    }

    let dataset = PanelDataset {
        unit_col: decl.unit.clone(),
        time_col: decl
            .time
            .clone()
            .unwrap_or_else(|| "__occurrence".to_string()),
        units,
        times,
        unit_of_row,
        time_of_row,
        columns,
    };
    dataset.validate()?;
    Ok(dataset)
}
