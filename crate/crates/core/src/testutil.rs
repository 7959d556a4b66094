//! Helpers shared by the unit tests.

use crate::data::PanelDataset;

/// Builds a panel from (unit, y, x) rows with synthetic time indices.
pub fn panel_from_rows(rows: &[(&str, f64, f64)]) -> PanelDataset {
    let mut units: Vec<String> = Vec::new();
    let mut unit_of_row = Vec::new();
    let mut time_of_row = Vec::new();
    let mut per_unit = std::collections::HashMap::new();
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut max_t = 0usize;
    for &(u, yv, xv) in rows {
        let uid = match units.iter().position(|s| s == u) {
            Some(i) => i,
            None => {
                units.push(u.to_string());
                units.len() - 1
            }
        };
        let t = per_unit.entry(uid).or_insert(0usize);
        unit_of_row.push(uid);
        time_of_row.push(*t);
        max_t = max_t.max(*t + 1);
        *t += 1;
        y.push(yv);
        x.push(xv);
    }
    PanelDataset {
        unit_col: "unit".into(),
        time_col: "time".into(),
        units,
        times: (1..=max_t).map(|t| t.to_string()).collect(),
        unit_of_row,
        time_of_row,
        columns: vec![("y".into(), y), ("x".into(), x)],
    }
}
