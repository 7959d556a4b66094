//! Import of externally fitted mixed models: design matrices, fitted
//! covariance structures, and fitted coefficient/EBLUP vectors, so the
//! bias diagnostic can run without refitting.
//!
//! File layout (one directory):
//!   x.csv      dense n x p matrix, comma separated, no header
//!   y.csv      n values, one per line
//!   z.txt      sparse triplet: header "n m nnz", then "i j value" (1-based)
//!   r.txt      sparse triplet for the n x n error covariance
//!   g.csv      m diagonal entries of G, one per line
//!   beta.csv   p fitted fixed effects
//!   eta.csv    m fitted EBLUPs
//!   blocks.csv optional: m permutation-block labels, one per line

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gls::RMatrix;
use crate::sparse::SparseMat;

/// An externally fitted mixed model.
#[derive(Debug, Clone)]
pub struct ExternalFit {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub z: SparseMat,
    pub g_diag: DVector<f64>,
    pub r: RMatrix,
    pub beta_hat: DVector<f64>,
    pub eta_hat: DVector<f64>,
    /// Partition of 0..m within which EBLUPs may be permuted.
    pub permutation_blocks: Vec<Vec<usize>>,
    pub labels_x: Vec<String>,
    pub labels_z: Vec<String>,
}

impl ExternalFit {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn m(&self) -> usize {
        self.z.ncols()
    }

    /// Validates dimensions, signs, and the Z/block structure.
    pub fn validate(&self) -> Result<()> {
        let (n, p, m) = (self.n(), self.p(), self.m());
        if self.y.len() != n {
            return Err(Error::Dimension(format!(
                "y has {} entries but X has {} rows",
                self.y.len(),
                n
            )));
        }
        if self.z.nrows() != n {
            return Err(Error::Dimension(format!(
                "Z has {} rows but X has {} rows",
                self.z.nrows(),
                n
            )));
        }
        if self.g_diag.len() != m {
            return Err(Error::Dimension(format!(
                "G has {} diagonal entries but Z has {} columns",
                self.g_diag.len(),
                m
            )));
        }
        if self.beta_hat.len() != p {
            return Err(Error::Dimension(format!(
                "beta has {} entries but X has {} columns",
                self.beta_hat.len(),
                p
            )));
        }
        if self.eta_hat.len() != m {
            return Err(Error::Dimension(format!(
                "eta has {} entries but Z has {} columns",
                self.eta_hat.len(),
                m
            )));
        }
        if self.r.nrows() != n {
            return Err(Error::Dimension(format!(
                "R is {}x{} but X has {} rows",
                self.r.nrows(),
                self.r.nrows(),
                n
            )));
        }
        if let Some(g) = self.g_diag.iter().find(|&&g| g < 0.0) {
            return Err(Error::Validity(format!(
                "G diagonal entries must be nonnegative, got {g}"
            )));
        }
        let mut row_has_entry = vec![false; n];
        for (i, _, v) in self.z.iter() {
            if v < 0.0 {
                return Err(Error::Validity(format!(
                    "imported Z entries must be nonnegative, got {v} in row {}",
                    i + 1
                )));
            }
            if v > 0.0 {
                row_has_entry[i] = true;
            }
        }
        if let Some(i) = row_has_entry.iter().position(|&h| !h) {
            return Err(Error::Validity(format!(
                "Z row {} has no nonzero entry",
                i + 1
            )));
        }
        let mut covered = vec![false; m];
        for block in &self.permutation_blocks {
            for &j in block {
                if j >= m {
                    return Err(Error::Dimension(format!(
                        "permutation block references effect {} beyond m = {m}",
                        j + 1
                    )));
                }
                if covered[j] {
                    return Err(Error::Validity(format!(
                        "permutation blocks overlap at effect {}",
                        j + 1
                    )));
                }
                covered[j] = true;
            }
        }
        if let Some(j) = covered.iter().position(|&c| !c) {
            return Err(Error::Validity(format!(
                "permutation blocks do not cover effect {}",
                j + 1
            )));
        }
        Ok(())
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn parse_dense_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::Parse(format!(
                        "{} line {}: non-numeric value '{}'",
                        path.display(),
                        ln + 1,
                        tok.trim()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse(format!(
                    "{} line {}: expected {} fields, got {}",
                    path.display(),
                    ln + 1,
                    first.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse(format!("{}: empty matrix", path.display())));
    }
    let (n, p) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

fn parse_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let text = read_to_string(path)?;
    let mut vals = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        for tok in line.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            vals.push(tok.parse::<f64>().map_err(|_| {
                Error::Parse(format!(
                    "{} line {}: non-numeric value '{tok}'",
                    path.display(),
                    ln + 1
                ))
            })?);
        }
    }
    if vals.is_empty() {
        return Err(Error::Parse(format!("{}: empty vector", path.display())));
    }
    Ok(DVector::from_vec(vals))
}

/// Parses the "n m nnz" + "i j value" triplet format (1-based indices).
type Triplets = (usize, usize, Vec<(usize, usize, f64)>);

fn parse_triplets(path: &Path) -> Result<Triplets> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse(format!("{}: empty triplet file", path.display())))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>().map_err(|_| {
                Error::Parse(format!(
                    "{}: bad dimension header '{header}'",
                    path.display()
                ))
            })
        })
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(Error::Parse(format!(
            "{}: dimension header must be 'n m nnz', got '{header}'",
            path.display()
        )));
    }
    let (n, m, nnz) = (dims[0], dims[1], dims[2]);
    let mut triplets = Vec::with_capacity(nnz);
    for (ln, line) in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::Parse(format!(
                "{} line {}: expected 'i j value'",
                path.display(),
                ln + 1
            )));
        }
        let i: usize = toks[0].parse().map_err(|_| {
            Error::Parse(format!("{} line {}: bad row index", path.display(), ln + 1))
        })?;
        let j: usize = toks[1].parse().map_err(|_| {
            Error::Parse(format!("{} line {}: bad col index", path.display(), ln + 1))
        })?;
        let v: f64 = toks[2].parse().map_err(|_| {
            Error::Parse(format!("{} line {}: bad value", path.display(), ln + 1))
        })?;
        if i == 0 || j == 0 || i > n || j > m {
            return Err(Error::Dimension(format!(
                "{} line {}: index ({i}, {j}) outside 1..{n} x 1..{m}",
                path.display(),
                ln + 1
            )));
        }
        triplets.push((i - 1, j - 1, v));
    }
    if triplets.len() != nnz {
        return Err(Error::Parse(format!(
            "{}: header promised {nnz} entries, found {}",
            path.display(),
            triplets.len()
        )));
    }
    Ok((n, m, triplets))
}

/// Reassembles a block-diagonal R from symmetric triplets by grouping
/// connected row/column indices. All-singleton blocks with one shared
/// value collapse to a scaled identity.
fn r_from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<RMatrix> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut i = i;
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for &(i, j, _) in triplets {
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri != rj {
            parent[ri] = rj;
        }
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let root = find(&mut parent, i);
        members[root].push(i);
    }
    let mut blocks: Vec<(Vec<usize>, DMatrix<f64>)> = Vec::new();
    let mut block_of_row = vec![usize::MAX; n];
    for rows in members.into_iter().filter(|m| !m.is_empty()) {
        let idx = blocks.len();
        for &r in &rows {
            block_of_row[r] = idx;
        }
        let size = rows.len();
        blocks.push((rows, DMatrix::zeros(size, size)));
    }
    for &(i, j, v) in triplets {
        let b = block_of_row[i];
        let (rows, mat) = &mut blocks[b];
        let li = rows.iter().position(|&r| r == i).unwrap();
        let lj = rows.iter().position(|&r| r == j).unwrap();
        mat[(li, lj)] += v;
        if li != lj {
            mat[(lj, li)] += v;
        }
    }
    let all_scalar = blocks.iter().all(|(rows, _)| rows.len() == 1);
    if all_scalar {
        let first = blocks
            .first()
            .map(|(_, m)| m[(0, 0)])
            .ok_or_else(|| Error::Validity("R has no entries".into()))?;
        if blocks.iter().all(|(_, m)| m[(0, 0)] == first) {
            return Ok(RMatrix::scaled_identity(n, first));
        }
    }
    Ok(RMatrix::BlockDiagonal { n, blocks })
}

/// Loads and validates an `ExternalFit` directory. Permutation blocks
/// default to groups of equal G diagonal values when `blocks.csv` is
/// absent.
pub fn load_external_fit<P: AsRef<Path>>(dir: P) -> Result<ExternalFit> {
    let dir = dir.as_ref();
    let x = parse_dense_csv(&dir.join("x.csv"))?;
    let y = parse_vector_csv(&dir.join("y.csv"))?;
    let (zn, zm, ztrip) = parse_triplets(&dir.join("z.txt"))?;
    let z = SparseMat::from_triplets(zn, zm, &ztrip)?;
    let (rn, rm, rtrip) = parse_triplets(&dir.join("r.txt"))?;
    if rn != rm {
        return Err(Error::Dimension(format!(
            "R must be square, got {rn}x{rm}"
        )));
    }
    let r = r_from_triplets(rn, &rtrip)?;
    let g_diag = parse_vector_csv(&dir.join("g.csv"))?;
    let beta_hat = parse_vector_csv(&dir.join("beta.csv"))?;
    let eta_hat = parse_vector_csv(&dir.join("eta.csv"))?;

    let m = z.ncols();
    let blocks_path = dir.join("blocks.csv");
    let permutation_blocks = if blocks_path.exists() {
        let text = read_to_string(&blocks_path)?;
        let labels: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect();
        if labels.len() != m {
            return Err(Error::Dimension(format!(
                "blocks.csv has {} labels but Z has {m} columns",
                labels.len()
            )));
        }
        let mut blocks: Vec<(String, Vec<usize>)> = Vec::new();
        for (j, label) in labels.into_iter().enumerate() {
            match blocks.iter_mut().find(|(l, _)| *l == label) {
                Some((_, members)) => members.push(j),
                None => blocks.push((label, vec![j])),
            }
        }
        blocks.into_iter().map(|(_, members)| members).collect()
    } else {
        blocks_from_g(&g_diag)
    };

    let fit = ExternalFit {
        labels_x: (1..=x.ncols()).map(|j| format!("x{j}")).collect(),
        labels_z: (1..=m).map(|j| format!("z{j}")).collect(),
        x,
        y,
        z,
        g_diag,
        r,
        beta_hat,
        eta_hat,
        permutation_blocks,
    };
    fit.validate()?;
    Ok(fit)
}

/// Groups random effects that share a fitted variance; this is the
/// grouping structure implied by a diagonal G.
pub fn blocks_from_g(g_diag: &DVector<f64>) -> Vec<Vec<usize>> {
    let mut blocks: Vec<(f64, Vec<usize>)> = Vec::new();
    for (j, &g) in g_diag.iter().enumerate() {
        match blocks.iter_mut().find(|(v, _)| *v == g) {
            Some((_, members)) => members.push(j),
            None => blocks.push((g, vec![j])),
        }
    }
    blocks.into_iter().map(|(_, members)| members).collect()
}

/// Writes an `ExternalFit` directory in the formats `load_external_fit`
/// reads.
pub fn write_external_fit<P: AsRef<Path>>(dir: P, fit: &ExternalFit) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let write = |name: &str, contents: String| -> Result<()> {
        fs::write(dir.join(name), contents).map_err(|e| Error::Io {
            path: dir.join(name).display().to_string(),
            source: e,
        })
    };

    let mut x_lines = String::new();
    for i in 0..fit.x.nrows() {
        let row: Vec<String> = (0..fit.x.ncols()).map(|j| fit.x[(i, j)].to_string()).collect();
        x_lines.push_str(&row.join(","));
        x_lines.push('\n');
    }
    write("x.csv", x_lines)?;
    let vec_lines =
        |v: &DVector<f64>| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("\n") + "\n";
    write("y.csv", vec_lines(&fit.y))?;
    write("g.csv", vec_lines(&fit.g_diag))?;
    write("beta.csv", vec_lines(&fit.beta_hat))?;
    write("eta.csv", vec_lines(&fit.eta_hat))?;

    let mut z_lines = format!("{} {} {}\n", fit.z.nrows(), fit.z.ncols(), fit.z.nnz());
    for (i, j, v) in fit.z.iter() {
        z_lines.push_str(&format!("{} {} {}\n", i + 1, j + 1, v));
    }
    write("z.txt", z_lines)?;

    let n = fit.r.nrows();
    let mut r_trips: Vec<(usize, usize, f64)> = Vec::new();
    match &fit.r {
        RMatrix::ScaledIdentity { scale, .. } => {
            for i in 0..n {
                r_trips.push((i, i, *scale));
            }
        }
        RMatrix::BlockDiagonal { blocks, .. } => {
            for (rows, mat) in blocks {
                for (a, &i) in rows.iter().enumerate() {
                    for (b, &j) in rows.iter().enumerate() {
                        if i <= j && mat[(a, b)] != 0.0 {
                            r_trips.push((i, j, mat[(a, b)]));
                        }
                    }
                }
            }
        }
    }
    let mut r_lines = format!("{n} {n} {}\n", r_trips.len());
    for (i, j, v) in &r_trips {
        r_lines.push_str(&format!("{} {} {}\n", i + 1, j + 1, v));
    }
    write("r.txt", r_lines)?;

    let mut label_of: Vec<usize> = vec![0; fit.m()];
    for (b, block) in fit.permutation_blocks.iter().enumerate() {
        for &j in block {
            label_of[j] = b;
        }
    }
    let block_lines: String = label_of
        .iter()
        .map(|b| format!("b{b}"))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n";
    write("blocks.csv", block_lines)?;
    Ok(())
}
