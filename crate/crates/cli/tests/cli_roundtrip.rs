//! End-to-end behavior of the batch front door: ingestion errors, output
//! round trips, determinism, and the subcommand contracts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::DMatrix;

use dfm_cli::config::{EmitFlags, RunConfig};
use dfm_cli::csvio::{read_matrix_csv, read_panel_csv, write_matrix_csv};
use dfm_cli::manifest::Manifest;
use dfm_cli::pipeline::{self, synthetic_quarters, SimulateArgs};
use dfm_cli::Stage;

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dfm_cli_test_{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn sim_args(dir: &Path, seed: u64) -> SimulateArgs {
    SimulateArgs {
        n: 20,
        t_len: 120,
        r: 4,
        q: 2,
        d: 1,
        snr: 2.0,
        i1_share: 0.1,
        idio_ar: 0.4,
        balanced_shocks: true,
        seed,
        out_dir: dir.to_path_buf(),
    }
}

#[test]
fn panel_read_rejects_bad_cells_and_dates() {
    let dir = tmp_dir("badpanel");
    let path = dir.join("panel.csv");

    fs::write(&path, "date,a,b\n1960Q1,1.0,2.0\n1960Q2,1.5,\n").unwrap();
    let err = read_panel_csv(&path).unwrap_err();
    assert_eq!(err.stage, Stage::Ingest);
    assert!(err.message.contains("row 3") && err.message.contains('b'), "{}", err.message);

    fs::write(&path, "date,a,b\n1960Q2,1.0,2.0\n1960Q1,1.5,2.5\n").unwrap();
    let err = read_panel_csv(&path).unwrap_err();
    assert!(err.message.contains("increasing"), "{}", err.message);

    fs::write(&path, "date,a,b\n1960Q1,1.0,2.0\n1960Q2,1.5,x\n").unwrap();
    assert!(read_panel_csv(&path).is_err());
}

#[test]
fn quarter_labels_parse_into_contiguous_panel() {
    let dir = tmp_dir("quarters");
    let path = dir.join("panel.csv");
    fs::write(
        &path,
        "date,a\n1960Q1,1.0\n1960Q2,2.0\n1960Q3,3.0\n1960Q4,4.0\n",
    )
    .unwrap();
    let panel = read_panel_csv(&path).unwrap();
    assert_eq!(panel.x.ncols(), 4);
    assert_eq!(panel.dates[3].quarter().to_string(), "1960Q4");
}

#[test]
fn matrix_round_trip_is_lossless_at_output_precision() {
    let dir = tmp_dir("matrix");
    let path = dir.join("m.csv");
    let data = DMatrix::from_fn(7, 3, |i, j| {
        (std::f64::consts::PI * (i as f64 + 1.0)).powf(1.0 + j as f64 / 3.0) * 1e-5
    });
    let quarters = synthetic_quarters(7);
    write_matrix_csv(
        &path,
        &["a".into(), "b".into(), "c".into()],
        Some(&quarters),
        &data,
    )
    .unwrap();
    let (names, back) = read_matrix_csv(&path).unwrap();
    assert_eq!(names, vec!["a", "b", "c"]);
    for i in 0..7 {
        for j in 0..3 {
            let rel = ((back[(i, j)] - data[(i, j)]) / data[(i, j)]).abs();
            assert!(rel < 1e-14, "relative error {rel}");
        }
    }
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let dir_a = tmp_dir("sim_a");
    let dir_b = tmp_dir("sim_b");
    pipeline::run_simulate(&sim_args(&dir_a, 7)).unwrap();
    pipeline::run_simulate(&sim_args(&dir_b, 7)).unwrap();
    let a = fs::read(dir_a.join("panel.csv")).unwrap();
    let b = fs::read(dir_b.join("panel.csv")).unwrap();
    assert_eq!(a, b);
    let ta = fs::read(dir_a.join("truth/factors.csv")).unwrap();
    let tb = fs::read(dir_b.join("truth/factors.csv")).unwrap();
    assert_eq!(ta, tb);

    let dir_c = tmp_dir("sim_c");
    pipeline::run_simulate(&sim_args(&dir_c, 8)).unwrap();
    assert_ne!(a, fs::read(dir_c.join("panel.csv")).unwrap());
}

fn fit_config(panel: &Path, meta: Option<PathBuf>, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.panel = panel.to_path_buf();
    cfg.metadata = meta;
    cfg.q = Some(2);
    cfg.r = Some(4);
    cfg.d = Some(1);
    cfg.em_max_iter = 60;
    cfg.out_dir = out.to_path_buf();
    cfg
}

#[test]
fn fit_emits_consistent_artifacts() {
    let dir = tmp_dir("fit_artifacts");
    let sim = dir.join("sim");
    pipeline::run_simulate(&sim_args(&sim, 21)).unwrap();
    let out = dir.join("fit");
    let cfg = fit_config(&sim.join("panel.csv"), Some(sim.join("metadata.csv")), &out);
    pipeline::run_fit(&cfg).unwrap();

    // Manifest echoes the overrides and marks them as such.
    let manifest = Manifest::load(&out).unwrap();
    let sel = manifest.selection.clone().unwrap();
    assert_eq!((sel.q_hat, sel.r_hat, sel.d_hat), (2, 4, 1));
    assert!(sel.overridden.contains(&"q".to_string()));
    assert_eq!(manifest.dims.n, 20);
    assert!(manifest.error.is_none());

    // MSE traces are ordered smoother <= filter <= predictor past burn-in.
    let (names, mse) = read_matrix_csv(&out.join("mse_trace.csv")).unwrap();
    assert_eq!(names, vec!["tr_p_predicted", "tr_p_filtered", "tr_p_smoothed"]);
    let burn = manifest.filter.unwrap().burn_in.min(mse.nrows() - 1);
    for t in burn..mse.nrows() {
        assert!(mse[(t, 2)] <= mse[(t, 1)] + 1e-9 && mse[(t, 1)] <= mse[(t, 0)] + 1e-9);
    }

    // Per-variable component files satisfy the additive identity against
    // the processed panel plus the removed deterministic path.
    let (ids, x_proc) = read_matrix_csv(&out.join("panel_processed.csv")).unwrap();
    for (i, id) in ids.iter().enumerate().take(4) {
        let text = fs::read_to_string(out.join(format!("per_variable/{id}.csv"))).unwrap();
        for (t, line) in text.lines().skip(1).enumerate() {
            let cells: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|c| c.parse::<f64>().unwrap())
                .collect();
            let (y, det, trend, cycle, resid, idio) =
                (cells[0], cells[1], cells[2], cells[3], cells[4], cells[5]);
            assert!(
                (det + trend + cycle + resid + idio - y).abs() < 1e-8,
                "additive identity broken for {id} at row {t}"
            );
            assert!((y - det - x_proc[(t, i)]).abs() < 1e-8);
        }
    }

    // chi + xi = processed panel.
    let (_, chi) = read_matrix_csv(&out.join("chi.csv")).unwrap();
    let (_, xi) = read_matrix_csv(&out.join("xi.csv")).unwrap();
    assert!((&chi + &xi - &x_proc).abs().max() < 1e-9);
}

#[test]
fn fit_outputs_are_deterministic_modulo_timestamp() {
    let dir = tmp_dir("fit_det");
    let sim = dir.join("sim");
    pipeline::run_simulate(&sim_args(&sim, 33)).unwrap();
    let out_a = dir.join("fit_a");
    let out_b = dir.join("fit_b");
    pipeline::run_fit(&fit_config(&sim.join("panel.csv"), None, &out_a)).unwrap();
    pipeline::run_fit(&fit_config(&sim.join("panel.csv"), None, &out_b)).unwrap();
    for name in [
        "panel_processed.csv",
        "params_lambda.csv",
        "factors_smoothed.csv",
        "chi.csv",
        "trends.csv",
        "cycles.csv",
        "mse_trace.csv",
        "loglik.csv",
    ] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "file {name} differs between identical runs");
    }
}

#[test]
fn decompose_reuses_a_fit_without_re_estimating() {
    let dir = tmp_dir("decompose");
    let sim = dir.join("sim");
    pipeline::run_simulate(&sim_args(&sim, 55)).unwrap();
    let out = dir.join("fit");
    pipeline::run_fit(&fit_config(&sim.join("panel.csv"), None, &out)).unwrap();

    let dec = dir.join("dec");
    pipeline::run_decompose(&out, &dec, None, None, &EmitFlags::default()).unwrap();
    // Same q and d: the re-derived trends match the fit's artifacts up to
    // the 15-digit round trip through the persisted CSVs.
    let (_, a) = read_matrix_csv(&out.join("trends.csv")).unwrap();
    let (_, b) = read_matrix_csv(&dec.join("trends.csv")).unwrap();
    let scale = a.abs().max().max(1.0);
    assert!((a - b).abs().max() / scale < 1e-9);
    // Per-variable outputs exist and carry the same additive identity.
    assert!(dec.join("per_variable").is_dir());
}

#[test]
fn report_copies_enabled_artifacts_and_nothing_else() {
    let dir = tmp_dir("report");
    let sim = dir.join("sim");
    pipeline::run_simulate(&sim_args(&sim, 77)).unwrap();
    let out = dir.join("fit");
    pipeline::run_fit(&fit_config(&sim.join("panel.csv"), None, &out)).unwrap();

    let rep = dir.join("rep");
    let emit = EmitFlags::parse("trends,mse_trace").unwrap();
    pipeline::run_report(&out, &rep, &emit).unwrap();
    let mut entries: Vec<String> = fs::read_dir(&rep)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    entries.sort();
    assert_eq!(
        entries,
        vec!["manifest.json", "mse_trace.csv", "tc_phi1.csv", "trends.csv"]
    );
}

#[test]
fn pipeline_failure_persists_a_diagnostic_manifest() {
    let dir = tmp_dir("failure");
    let mut cfg = RunConfig::default();
    cfg.panel = dir.join("missing.csv");
    cfg.out_dir = dir.join("out");
    let err = pipeline::run_fit(&cfg).unwrap_err();
    assert_eq!(err.stage, Stage::Ingest);
    let manifest = Manifest::load(&dir.join("out")).unwrap();
    assert_eq!(manifest.error.unwrap().stage, "ingest");
}

#[test]
fn binary_reports_usage_errors_with_nonzero_exit() {
    let exe = env!("CARGO_BIN_EXE_dfm");
    let out = Command::new(exe).arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(exe).args(["fit", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn binary_simulate_and_fit_round_trip() {
    let dir = tmp_dir("binary_e2e");
    let exe = env!("CARGO_BIN_EXE_dfm");
    let sim = dir.join("sim");
    let status = Command::new(exe)
        .args([
            "simulate", "--n", "15", "--t", "100", "--r", "2", "--q", "2", "--d", "1",
            "--balanced", "--seed", "5",
        ])
        .arg("--out")
        .arg(&sim)
        .status()
        .unwrap();
    assert!(status.success());

    let fit = dir.join("fit");
    let status = Command::new(exe)
        .args(["fit", "--q", "2", "--r", "2", "--d", "1", "--em-max-iter", "40"])
        .arg("--panel")
        .arg(sim.join("panel.csv"))
        .arg("--out")
        .arg(&fit)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(fit.join("manifest.json").exists());
    assert!(fit.join("trends.csv").exists());
}

#[test]
fn monthly_panels_aggregate_by_calendar_quarter() {
    let dir = tmp_dir("monthly");
    let path = dir.join("panel.csv");
    let mut text = String::from("date,a\n");
    // 2.5 years of monthly data: the trailing half quarter is dropped.
    let mut month = 0;
    for _ in 0..30 {
        let year = 1970 + month / 12;
        let m = month % 12 + 1;
        text.push_str(&format!("{year}-{m:02}-01,{}\n", month + 1));
        month += 1;
    }
    fs::write(&path, text).unwrap();

    let mut cfg = RunConfig::default();
    cfg.panel = path;
    cfg.frequency = dfm_core::preprocess::Frequency::Monthly;
    let prep = pipeline::load_and_prepare(&cfg).unwrap();
    // 30 months -> 10 full quarters; averages of consecutive month triples
    // (before detrending, which recenters).
    assert_eq!(prep.quarters.len(), 10);
    assert_eq!(prep.quarters[0].to_string(), "1970Q1");
    assert_eq!(prep.quarters[9].to_string(), "1972Q2");
}

#[test]
fn select_identifies_three_shocks_on_synthetic_panel() {
    let dir = tmp_dir("select_q3");
    let sim = dir.join("sim");
    let mut args = sim_args(&sim, 4242);
    args.n = 100;
    args.t_len = 230;
    args.r = 6;
    args.q = 3;
    args.d = 2;
    args.i1_share = 0.0;
    args.idio_ar = 0.3;
    pipeline::run_simulate(&args).unwrap();

    let mut cfg = RunConfig::default();
    cfg.panel = sim.join("panel.csv");
    cfg.out_dir = dir.join("sel");
    pipeline::run_select(&cfg).unwrap();
    let manifest = Manifest::load(&dir.join("sel")).unwrap();
    let sel = manifest.selection.unwrap();
    assert_eq!(sel.q_hat, 3, "selected q {}", sel.q_hat);
    assert_eq!(sel.trend_count_hat, 1);
    assert_eq!(sel.r_hat, 6);
    assert!(dir.join("sel/selection_report.csv").exists());
    assert!(dir.join("sel/rho.csv").exists());
}
