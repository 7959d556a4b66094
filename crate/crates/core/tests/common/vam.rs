//! Synthetic multiple-membership fixture in the style of a
//! complete-persistence value-added model: students observed over
//! three years, each post-year-1 score loading on the current and the
//! previous year's teacher, per-student 3x3 error blocks, and two
//! teacher-variance blocks.

use nalgebra::{DMatrix, DVector};
use panelspec_core::external::ExternalFit;
use panelspec_core::gls::RMatrix;
use panelspec_core::sparse::SparseMat;

use super::Lcg;

pub struct VamFixture {
    pub fit: ExternalFit,
    pub dense_v: DMatrix<f64>,
}

pub fn make_vam_fixture(n_students: usize, seed: u64) -> VamFixture {
    let mut rng = Lcg(seed);
    let years = 3usize;
    let n = n_students * years;
    let teachers_y1 = 6usize;
    let teachers_y2 = 5usize;
    let teachers_y3 = 5usize;
    let m = teachers_y1 + teachers_y2 + teachers_y3;

    // teacher assignment per student and year
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    let mut assignments = Vec::with_capacity(n_students);
    for s in 0..n_students {
        let t1 = (rng.next_u64() as usize) % teachers_y1;
        let t2 = teachers_y1 + (rng.next_u64() as usize) % teachers_y2;
        let t3 = teachers_y1 + teachers_y2 + (rng.next_u64() as usize) % teachers_y3;
        assignments.push((t1, t2, t3));
        let row0 = s * years;
        trips.push((row0, t1, 1.0));
        // post-year-1 rows carry two unit-weight memberships
        trips.push((row0 + 1, t2, 1.0));
        trips.push((row0 + 1, t1, 1.0));
        trips.push((row0 + 2, t3, 1.0));
        trips.push((row0 + 2, t2, 1.0));
    }
    let z = SparseMat::from_triplets(n, m, &trips).unwrap();

    // two variance blocks: year-1 teachers vs later-year teachers
    let g1 = 0.65;
    let g2 = 0.4;
    let mut g_diag: DVector<f64> = DVector::zeros(m);
    for j in 0..m {
        g_diag[j] = if j < teachers_y1 { g1 } else { g2 };
    }
    let blocks_perm = vec![
        (0..teachers_y1).collect::<Vec<_>>(),
        (teachers_y1..m).collect::<Vec<_>>(),
    ];

    // per-student 3x3 SPD error blocks with serial correlation
    let mut r_blocks = Vec::with_capacity(n_students);
    let base = DMatrix::from_row_slice(
        3,
        3,
        &[1.0, 0.45, 0.25, 0.45, 1.1, 0.45, 0.25, 0.45, 1.2],
    );
    for s in 0..n_students {
        let scale = 0.8 + 0.4 * rng.uniform();
        r_blocks.push((
            vec![s * years, s * years + 1, s * years + 2],
            &base * scale,
        ));
    }
    let r = RMatrix::BlockDiagonal {
        n,
        blocks: r_blocks.clone(),
    };

    // fixed effects: intercept, a student covariate, a year trend
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => ((i / years) as f64 / n_students as f64 - 0.5) * 2.0,
        _ => (i % years) as f64,
    });

    // generate y from the model with true effects
    let eta_true = DVector::from_fn(m, |j, _| {
        g_diag[j].sqrt() * {
            let mut r2 = Lcg(seed ^ (j as u64 + 1));
            r2.normal()
        }
    });
    let beta_true = DVector::from_vec(vec![24.0, 0.8, 1.1]);
    let mut y = &x * &beta_true + z.mul_vec(&eta_true);
    for (rows, mat) in &r_blocks {
        let chol = mat.clone().cholesky().unwrap();
        let e = DVector::from_fn(3, |_, _| rng.normal());
        let corr = chol.l() * e;
        for (k, &i) in rows.iter().enumerate() {
            y[i] += corr[k];
        }
    }

    // dense V for the oracle
    let zd = z.to_dense();
    let mut v = DMatrix::zeros(n, n);
    for k in 0..m {
        for i in 0..n {
            for j in 0..n {
                v[(i, j)] += zd[(i, k)] * g_diag[k] * zd[(j, k)];
            }
        }
    }
    for (rows, mat) in &r_blocks {
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in rows.iter().enumerate() {
                v[(i, j)] += mat[(a, b)];
            }
        }
    }

    // "fitted" beta and EBLUPs from the dense formulas, as an external
    // tool would supply them
    let v_inv = v.clone().try_inverse().unwrap();
    let xtvix = x.transpose() * &v_inv * &x;
    let beta_hat = xtvix.clone().try_inverse().unwrap() * (x.transpose() * &v_inv * &y);
    let resid = &y - &x * &beta_hat;
    let eta_hat_dense = {
        let ztvr = zd.transpose() * &v_inv * &resid;
        DVector::from_fn(m, |j, _| g_diag[j] * ztvr[j])
    };

    let fit = ExternalFit {
        labels_x: vec!["x1".into(), "x2".into(), "x3".into()],
        labels_z: (1..=m).map(|j| format!("t{j}")).collect(),
        x,
        y,
        z,
        g_diag,
        r,
        beta_hat,
        eta_hat: eta_hat_dense,
        permutation_blocks: blocks_perm,
    };
    VamFixture { fit, dense_v: v }
}
