//! End-to-end tests of the command-line surface: exit codes, output
//! formats, and determinism.

use std::path::PathBuf;
use std::process::{Command, Output};

use nalgebra::{DMatrix, DVector};
use panelspec_core::external::{write_external_fit, ExternalFit};
use panelspec_core::gls::RMatrix;
use panelspec_core::report::AnalysisReport;
use panelspec_core::sparse::SparseMat;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_panelspec"))
}

fn gasoline() -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/gasoline.csv")
        .display()
        .to_string()
}

fn gasoline_args(cmd: &mut Command) {
    cmd.args([
        "--data",
        &gasoline(),
        "--response",
        "lgaspcar",
        "--fixed",
        "lincomep,lrpmg,lcarpcap",
        "--group",
        "country",
    ]);
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn fit_prints_the_reference_tables() {
    let mut cmd = bin();
    cmd.arg("fit");
    gasoline_args(&mut cmd);
    let out = run(&mut cmd);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("0.6622"), "within slope missing:\n{text}");
    assert!(text.contains("2.2859"), "LSDV intercept missing:\n{text}");
    assert!(text.contains("1.9967"), "RE intercept missing:\n{text}");
    assert!(text.contains("sigma2_eps"), "{text}");
}

#[test]
fn fit_with_reml_backend_reproduces_the_reference_re_column() {
    let mut cmd = bin();
    cmd.args(["fit", "--variance", "reml"]);
    gasoline_args(&mut cmd);
    let out = run(&mut cmd);
    assert!(out.status.success());
    let text = stdout(&out);
    for value in ["2.1509", "0.5920", "-0.3744", "-0.6176"] {
        assert!(text.contains(value), "missing {value}:\n{text}");
    }
}

#[test]
fn missing_group_flag_is_a_usage_error() {
    let out = run(bin().args([
        "fit",
        "--data",
        &gasoline(),
        "--response",
        "lgaspcar",
        "--fixed",
        "lincomep",
    ]));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unknown_column_is_a_schema_error_with_exit_2() {
    let mut cmd = bin();
    cmd.args([
        "fit",
        "--data",
        &gasoline(),
        "--response",
        "lgaspcar",
        "--fixed",
        "nope",
        "--group",
        "country",
    ]);
    let out = run(&mut cmd);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nope"));
}

#[test]
fn hausman_mirrors_the_classical_output_line() {
    let mut cmd = bin();
    cmd.arg("hausman");
    gasoline_args(&mut cmd);
    let out = run(&mut cmd);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("chisq = 302.8037, df = 3, p-value < 2.2e-16"),
        "{text}"
    );
}

#[test]
fn hausman_cre_flag_switches_to_the_wald_test() {
    let mut cmd = bin();
    cmd.args(["hausman", "--cre"]);
    gasoline_args(&mut cmd);
    let out = run(&mut cmd);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("wald = 26.495"), "{text}");
    assert!(text.contains("mean(lincomep)"), "{text}");
}

#[test]
fn biastest_writes_report_and_svgs() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let svg_dir = dir.path().join("svgs");
    let mut cmd = bin();
    cmd.arg("biastest");
    gasoline_args(&mut cmd);
    cmd.args([
        "--n-perms",
        "2000",
        "--seed",
        "42",
        "--out",
        report_path.to_str().unwrap(),
        "--svg-dir",
        svg_dir.to_str().unwrap(),
    ]);
    let out = run(&mut cmd);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("Bias Estimate"), "{text}");

    let json = std::fs::read_to_string(&report_path).unwrap();
    let report = AnalysisReport::from_json(&json).unwrap();
    let bias = report.bias.unwrap();
    assert_eq!(bias.entries.len(), 4);
    assert_eq!(bias.seed, 42);

    let svgs: Vec<_> = std::fs::read_dir(&svg_dir).unwrap().collect();
    assert_eq!(svgs.len(), 4);
    let one = std::fs::read_to_string(svg_dir.join("bias__Intercept_.svg")).unwrap();
    assert!(one.contains("stroke-dasharray"));
}

#[test]
fn printed_bias_numbers_are_rounded_views_of_the_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let mut cmd = bin();
    cmd.arg("biastest");
    gasoline_args(&mut cmd);
    cmd.args([
        "--n-perms",
        "500",
        "--no-svg",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let out = run(&mut cmd);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let report =
        AnalysisReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for row in &report.comparison {
        for v in [row.fe, row.re, row.bias_estimate, row.bias_p_value]
            .into_iter()
            .flatten()
        {
            let rounded = format!("{v:.4}");
            assert!(
                text.contains(rounded.trim_start_matches('+')),
                "printed table misses {rounded}:\n{text}"
            );
        }
    }
}

#[test]
fn malformed_k_vector_reports_expected_length() {
    let mut cmd = bin();
    cmd.arg("biastest");
    gasoline_args(&mut cmd);
    cmd.args(["--n-perms", "10", "--no-svg", "--k", "1,0"]);
    let out = run(&mut cmd);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains('4'), "{}", stderr(&out));
}

#[test]
fn contrast_k_vector_produces_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let mut cmd = bin();
    cmd.arg("biastest");
    gasoline_args(&mut cmd);
    cmd.args([
        "--n-perms",
        "200",
        "--no-svg",
        "--k",
        "0,1,-1,0",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let out = run(&mut cmd);
    assert!(out.status.success(), "{}", stderr(&out));
    let report =
        AnalysisReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.bias.unwrap().entries.len(), 1);
}

#[test]
fn identical_invocations_produce_byte_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (name, threads) in [("a.json", "1"), ("b.json", "2"), ("c.json", "1")] {
        let path = dir.path().join(name);
        let mut cmd = bin();
        cmd.args(["--threads", threads, "biastest"]);
        gasoline_args(&mut cmd);
        cmd.args([
            "--n-perms",
            "5000",
            "--seed",
            "7",
            "--no-svg",
            "--out",
            path.to_str().unwrap(),
        ]);
        let out = run(&mut cmd);
        assert!(out.status.success(), "{}", stderr(&out));
        outputs.push(std::fs::read(path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "thread count changed the report");
    assert_eq!(outputs[0], outputs[2], "repeat run changed the report");
}

#[test]
fn simulate_writes_loadable_data_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("sim.csv");
    let truth = dir.path().join("truth.json");
    let out = run(bin().args([
        "simulate",
        "--units",
        "20",
        "--periods",
        "4",
        "--delta",
        "0.5",
        "--seed",
        "9",
        "--out-data",
        data.to_str().unwrap(),
        "--out-truth",
        truth.to_str().unwrap(),
    ]));
    assert!(out.status.success(), "{}", stderr(&out));
    let truth_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&truth).unwrap()).unwrap();
    assert_eq!(truth_json["delta"], 0.5);
    assert_eq!(truth_json["n_units"], 20);

    // the generated panel feeds straight back into fit
    let out = run(bin().args([
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--response",
        "y",
        "--fixed",
        "x1,x2",
        "--group",
        "unit",
    ]));
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn simulate_rejects_zero_units() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin().args([
        "simulate",
        "--units",
        "0",
        "--periods",
        "4",
        "--out-data",
        dir.path().join("d.csv").to_str().unwrap(),
        "--out-truth",
        dir.path().join("t.json").to_str().unwrap(),
    ]));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn duplicate_panel_keys_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dup.csv");
    std::fs::write(&path, "unit,time,y,x\na,1,1.0,0.5\na,1,2.0,0.7\n").unwrap();
    let out = run(bin().args([
        "fit",
        "--data",
        path.to_str().unwrap(),
        "--response",
        "y",
        "--fixed",
        "x",
        "--group",
        "unit",
    ]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("duplicate"), "{}", stderr(&out));
}

fn small_external_fit() -> ExternalFit {
    let n = 9;
    let groups = [0usize, 0, 0, 1, 1, 1, 2, 2, 2];
    let z = SparseMat::incidence(&groups, 3);
    ExternalFit {
        labels_x: vec!["x1".into(), "x2".into()],
        labels_z: vec!["z1".into(), "z2".into(), "z3".into()],
        x: DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 / 4.0 }),
        y: DVector::from_fn(n, |i, _| (i as f64).cos()),
        z,
        g_diag: DVector::from_element(3, 0.5),
        r: RMatrix::scaled_identity(n, 1.0),
        beta_hat: DVector::from_vec(vec![0.4, -0.1]),
        eta_hat: DVector::from_vec(vec![0.2, -0.3, 0.1]),
        permutation_blocks: vec![vec![0, 1, 2]],
    }
}

#[test]
fn import_fit_validates_an_external_directory() {
    let dir = tempfile::tempdir().unwrap();
    write_external_fit(dir.path(), &small_external_fit()).unwrap();
    let out = run(bin().args(["import-fit", "--external-fit", dir.path().to_str().unwrap()]));
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("n = 9, p = 2, m = 3"));
    assert!(stdout(&out).contains("validation passed"));
}

#[test]
fn import_fit_rejects_negative_g_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut fit = small_external_fit();
    fit.g_diag[0] = -0.25;
    write_external_fit(dir.path(), &fit).unwrap();
    let out = run(bin().args(["import-fit", "--external-fit", dir.path().to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nonnegative"), "{}", stderr(&out));
}

#[test]
fn biastest_runs_on_an_external_fit_directory() {
    let dir = tempfile::tempdir().unwrap();
    write_external_fit(dir.path(), &small_external_fit()).unwrap();
    let report_path = dir.path().join("report.json");
    let out = run(bin().args([
        "biastest",
        "--external-fit",
        dir.path().to_str().unwrap(),
        "--n-perms",
        "100",
        "--no-svg",
        "--k",
        "0,1",
        "--out",
        report_path.to_str().unwrap(),
    ]));
    assert!(out.status.success(), "{}", stderr(&out));
    let report =
        AnalysisReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let bias = report.bias.unwrap();
    assert_eq!(bias.entries.len(), 1);
    // exhaustive mode kicks in for 3! = 6 total permutations
    assert_eq!(bias.entries[0].n_permutations, 6);
}
