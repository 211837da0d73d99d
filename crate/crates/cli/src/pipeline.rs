//! Stage orchestration: preprocess -> select -> fit -> decompose, artifact
//! emission, and the simulate/report utility commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, RowDVector};

use dfm_core::em::{self, TieGroups};
use dfm_core::kalman::{self, InitialState, SmootherVariant};
use dfm_core::model::{build_state_space, ModelSpec, Params};
use dfm_core::modelselect::{self, SelectionReport};
use dfm_core::preprocess::{
    self, DetrendKind, DetrendResult, Frequency, RhoMode, SeriesMeta,
};
use dfm_core::simulate::{gen_dfm, DgpConfig};
use dfm_core::trendcycle::{self, TcDecomposition};

use crate::config::{EmitFlags, RunConfig};
use crate::csvio::{
    self, fmt_num, read_matrix_csv, read_panel_csv, validate_quarterly, write_matrix_csv, PanelData,
    Quarter,
};
use crate::manifest::{
    Algorithm, Dims, EmSummary, FilterSummary, Inputs, Manifest, Selection, StageFailure,
};
use crate::{at_stage, CliError, CliResult, Stage};

/// Preprocessed panel ready for estimation.
pub struct Prepared {
    pub ids: Vec<String>,
    pub quarters: Vec<Quarter>,
    /// `n x T` model input.
    pub x: DMatrix<f64>,
    pub t_raw: usize,
    pub detrend: Vec<DetrendResult>,
    pub metas: Vec<SeriesMeta>,
}

fn frequency_name(f: Frequency) -> &'static str {
    match f {
        Frequency::Quarterly => "quarterly",
        Frequency::Monthly => "monthly",
        Frequency::Daily => "daily",
    }
}

/// Aggregates raw observations to calendar quarters by simple averages.
/// Interior quarters must be fully populated for monthly data; a partial
/// trailing quarter is dropped.
fn aggregate_panel(panel: &PanelData, freq: Frequency) -> CliResult<(Vec<Quarter>, DMatrix<f64>)> {
    let n = panel.x.nrows();
    let t_raw = panel.x.ncols();
    if freq == Frequency::Quarterly {
        let quarters: Vec<Quarter> = panel.dates.iter().map(|d| d.quarter()).collect();
        validate_quarterly(&quarters)?;
        return Ok((quarters, panel.x.clone()));
    }

    let mut groups: Vec<(Quarter, Vec<usize>)> = Vec::new();
    for (idx, date) in panel.dates.iter().enumerate() {
        let q = date.quarter();
        match groups.last_mut() {
            Some((quarter, cols)) if *quarter == q => cols.push(idx),
            _ => groups.push((q, vec![idx])),
        }
    }
    // Drop a light trailing quarter (fewer observations than expected).
    if let Some((_, cols)) = groups.last() {
        let expected = match freq {
            Frequency::Monthly => 3,
            Frequency::Daily => {
                let interior_max = groups
                    .iter()
                    .take(groups.len().saturating_sub(1))
                    .map(|(_, c)| c.len())
                    .max()
                    .unwrap_or(cols.len());
                (interior_max * 4) / 5
            }
            Frequency::Quarterly => unreachable!(),
        };
        if cols.len() < expected {
            groups.pop();
        }
    }
    if groups.is_empty() {
        return Err(CliError::new(
            Stage::Preprocess,
            "no complete quarter in the sample",
        ));
    }
    if freq == Frequency::Monthly {
        for (q, cols) in &groups {
            if cols.len() != 3 {
                return Err(CliError::new(
                    Stage::Preprocess,
                    format!("quarter {q} has {} monthly observations, expected 3", cols.len()),
                ));
            }
        }
    }
    let t_q = groups.len();
    let mut x = DMatrix::zeros(n, t_q);
    let mut quarters = Vec::with_capacity(t_q);
    for (tq, (q, cols)) in groups.iter().enumerate() {
        quarters.push(*q);
        for i in 0..n {
            let sum: f64 = cols.iter().map(|&c| panel.x[(i, c)]).sum();
            x[(i, tq)] = sum / cols.len() as f64;
        }
    }
    let _ = t_raw;
    validate_quarterly(&quarters)?;
    Ok((quarters, x))
}

/// Full pretreatment: aggregation, optional winsorizing, transforms,
/// detrending. Series are aligned on a common sample when log-difference
/// transforms shorten some of them.
pub fn prepare(panel: &PanelData, metas: Vec<SeriesMeta>, cfg: &RunConfig) -> CliResult<Prepared> {
    let n = panel.x.nrows();
    if metas.len() != n {
        return Err(CliError::new(
            Stage::Preprocess,
            format!("metadata covers {} series, panel has {}", metas.len(), n),
        ));
    }
    let t_raw = panel.x.ncols();
    let (quarters, aggregated) = aggregate_panel(panel, cfg.frequency)?;
    let t_q = aggregated.ncols();

    let any_dlog = metas
        .iter()
        .any(|m| m.transform == dfm_core::preprocess::Transform::DLog);
    let t_out = if any_dlog { t_q - 1 } else { t_q };
    let out_quarters: Vec<Quarter> = quarters[t_q - t_out..].to_vec();

    let mut x = DMatrix::zeros(n, t_out);
    let mut detrend_results = Vec::with_capacity(n);
    for i in 0..n {
        let mut series: Vec<f64> = (0..t_q).map(|t| aggregated[(i, t)]).collect();
        if let Some(z) = cfg.winsorize {
            preprocess::winsorize(&mut series, z);
        }
        let transformed = at_stage(
            Stage::Preprocess,
            preprocess::apply_transform(&series, metas[i].transform).map_err(|e| {
                format!("series `{}`: {e}", metas[i].id)
            }),
        )?;
        // Align on the common (shortest) sample.
        let aligned: Vec<f64> = transformed[transformed.len() - t_out..].to_vec();
        let (res, resid) = at_stage(
            Stage::Preprocess,
            preprocess::detrend(&aligned, metas[i].detrend_mode, cfg.detrend_max_lag)
                .map_err(|e| format!("series `{}`: {e}", metas[i].id)),
        )?;
        for t in 0..t_out {
            x[(i, t)] = resid[t];
        }
        detrend_results.push(res);
    }

    Ok(Prepared {
        ids: panel.ids.clone(),
        quarters: out_quarters,
        x,
        t_raw,
        detrend: detrend_results,
        metas,
    })
}

/// Resolved dimension and classification choices for a run.
pub struct Resolved {
    pub report: SelectionReport,
    pub rho: Vec<bool>,
    pub overridden: Vec<String>,
    pub bandwidth: usize,
}

/// Runs the selection criteria in the published order (trend count, then
/// shocks, then static factors, then unit-root classification), honoring
/// overrides from the configuration.
pub fn resolve_selection(prep: &Prepared, cfg: &RunConfig) -> CliResult<Resolved> {
    let n = prep.x.nrows();
    let t_len = prep.x.ncols();
    let dx = prep.x.columns(1, t_len - 1) - prep.x.columns(0, t_len - 1);
    let bandwidth = cfg.bandwidth.unwrap_or_else(|| modelselect::default_bandwidth(t_len));
    let mut warnings = Vec::new();
    let mut overridden = Vec::new();

    let trend_count_sel = at_stage(
        Stage::Select,
        modelselect::select_trend_count(&prep.x, cfg.trend_kmax, modelselect::TREND_THRESHOLD_SCALE),
    )?;
    warnings.extend(trend_count_sel.warnings.clone());

    let q_hat = match cfg.q {
        Some(q) => {
            overridden.push("q".into());
            q
        }
        None => {
            let est = at_stage(
                Stage::Select,
                modelselect::spectral_density_eigs(&dx, bandwidth, cfg.q_max.max(cfg.r_max)),
            )?;
            let sel = at_stage(Stage::Select, modelselect::select_q(&est, n, t_len, cfg.q_max))?;
            warnings.extend(sel.warnings);
            sel.q_hat
        }
    };
    if q_hat == 0 {
        return Err(CliError::new(
            Stage::Select,
            "no common shocks detected (q = 0); the factor model does not apply",
        ));
    }

    let trend_count = match (cfg.q, cfg.d) {
        (Some(q), Some(d)) => {
            overridden.push("d".into());
            q - d
        }
        _ => trend_count_sel.trend_count,
    };

    let r_selection = at_stage(
        Stage::Select,
        modelselect::select_r(&dx, q_hat, cfg.r_max, bandwidth, cfg.tol_share),
    )?;
    let r_hat = match cfg.r {
        Some(r) => {
            overridden.push("r".into());
            r
        }
        None => {
            warnings.extend(r_selection.warnings.clone());
            r_selection.r_hat
        }
    };

    // Unit-root classification from the pre-estimation common components.
    let (lambda0, factors0) = at_stage(Stage::Select, em::pca_factors(&prep.x, r_hat.min(n)))?;
    let chi0 = &lambda0 * &factors0;
    let modes: Vec<RhoMode> = prep.metas.iter().map(|m| m.rho_mode).collect();
    let rho_decisions = at_stage(
        Stage::Select,
        modelselect::classify_idiosyncratic(&prep.x, &chi0, &modes),
    )?;
    let rho: Vec<bool> = rho_decisions.iter().map(|d| d.rho).collect();

    let mut report = SelectionReport {
        q_hat,
        trend_count_hat: trend_count,
        r_hat,
        d_hat: 0,
        table: r_selection.table,
        rho: rho_decisions,
        warnings,
    };
    report.reconcile();

    Ok(Resolved {
        report,
        rho,
        overridden,
        bandwidth,
    })
}

/// Builds the tie groups from config declarations and the metadata column.
pub fn resolve_ties(prep: &Prepared, cfg: &RunConfig) -> CliResult<TieGroups> {
    let mut by_name: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, meta) in prep.metas.iter().enumerate() {
        if let Some(name) = &meta.tie_group {
            by_name.entry(name.clone()).or_default().push(i);
        }
    }
    for (name, members) in &cfg.ties {
        let entry = by_name.entry(name.clone()).or_default();
        for id in members {
            let idx = prep.ids.iter().position(|s| s == id).ok_or_else(|| {
                CliError::new(
                    Stage::Config,
                    format!("tie group `{name}` references unknown series `{id}`"),
                )
            })?;
            if !entry.contains(&idx) {
                entry.push(idx);
            }
        }
    }
    let groups: Vec<Vec<usize>> = by_name
        .into_values()
        .filter(|members| members.len() >= 2)
        .collect();
    let ties = TieGroups { groups };
    at_stage(Stage::Config, ties.validate(prep.ids.len()))?;
    Ok(ties)
}

/// Everything a completed fit knows, kept for artifact emission.
pub struct FitOutput {
    pub prep: Prepared,
    pub spec: ModelSpec,
    pub resolved: Resolved,
    pub em_state: em::EmState,
    pub estimates: dfm_core::model::FactorEstimates,
    pub mse: Vec<(f64, f64, f64)>,
    pub burn_in: usize,
    pub steady_trace: f64,
    pub riccati_iterations: usize,
    /// Loadings in the identified (normalized) coordinates used for the
    /// trend-cycle artifacts.
    pub lambda_star: nalgebra::DMatrix<f64>,
    pub tc: TcDecomposition,
}

/// Complete fit: preprocess, select (honoring overrides), estimate, and
/// decompose. Artifact writing is separate so callers can inspect first.
pub fn fit(cfg: &RunConfig) -> CliResult<FitOutput> {
    at_stage(Stage::Config, cfg.validate().map_err(|e| e.message))?;
    let panel = read_panel_csv(&cfg.panel)?;
    let metas = match &cfg.metadata {
        Some(path) => align_metadata(csvio::read_metadata_csv(path)?, &panel.ids)?,
        None => panel.ids.iter().map(|id| SeriesMeta::new(id.clone())).collect(),
    };
    let prep = prepare(&panel, metas, cfg)?;
    let resolved = resolve_selection(&prep, cfg)?;
    let ties = resolve_ties(&prep, cfg)?;

    let n = prep.x.nrows();
    let t_len = prep.x.ncols();
    let spec = ModelSpec {
        n,
        t_len,
        r: resolved.report.r_hat,
        q: resolved.report.q_hat,
        d: resolved.report.d_hat,
        var_order: 2,
        diffuse_scale: cfg.diffuse_scale,
        em_tol: cfg.em_tol,
        em_max_iter: cfg.em_max_iter,
        em_min_iter: cfg.em_min_iter,
        i1_floor_frac: cfg.i1_floor_frac,
    };
    at_stage(Stage::Fit, spec.validate())?;

    let (em_state, estimates) = at_stage(Stage::Fit, em::run_em(&prep.x, &spec, &resolved.rho, &ties))?;

    // One more filter pass at the accepted parameters for the MSE paths and
    // the steady-state diagnostics.
    let ss = at_stage(Stage::Fit, build_state_space(&em_state.params, &spec))?;
    let filter = at_stage(
        Stage::Fit,
        kalman::kf_forward(&ss, &prep.x, &InitialState::Diffuse { kappa: spec.diffuse_scale }),
    )?;
    let smoother = at_stage(
        Stage::Fit,
        kalman::ks_backward(&filter, &ss, SmootherVariant::DkNoInverse),
    )?;
    let mse = kalman::mse_traces(&filter, &smoother);
    let riccati = at_stage(Stage::Fit, kalman::riccati_steady_state(&ss, 1e-10, 50_000))?;
    let burn_in = kalman::burn_in_index(&filter.p_pred, &riccati.p_star, 1e-6);

    let f_block = estimates.factor_block(spec.r);
    let (lambda_star, f_star) = at_stage(
        Stage::Decompose,
        trendcycle::normalize_loadings(&em_state.params.lambda, &f_block),
    )?;
    let tc = at_stage(
        Stage::Decompose,
        trendcycle::decompose_factors(&f_star, spec.q, spec.d),
    )?;

    Ok(FitOutput {
        prep,
        spec,
        resolved,
        em_state,
        estimates,
        mse,
        burn_in,
        steady_trace: riccati.p_star.trace(),
        riccati_iterations: riccati.iterations,
        lambda_star,
        tc,
    })
}

fn align_metadata(metas: Vec<SeriesMeta>, ids: &[String]) -> CliResult<Vec<SeriesMeta>> {
    let mut by_id: BTreeMap<String, SeriesMeta> =
        metas.into_iter().map(|m| (m.id.clone(), m)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .remove(id)
                .map(Ok)
                .unwrap_or_else(|| Ok(SeriesMeta::new(id.clone())))
        })
        .collect()
}

fn state_column_names(spec: &ModelSpec, rho: &[bool], ids: &[String]) -> Vec<String> {
    let mut names = Vec::with_capacity(2 * spec.r + rho.iter().filter(|&&b| b).count());
    for j in 1..=spec.r {
        names.push(format!("f{j}"));
    }
    for j in 1..=spec.r {
        names.push(format!("f{j}_lag"));
    }
    for (i, &flag) in rho.iter().enumerate() {
        if flag {
            names.push(format!("xi_{}", ids[i]));
        }
    }
    names
}

/// Writes all fit artifacts honoring the emit flags, plus the manifest.
pub fn write_fit_artifacts(out: &FitOutput, cfg: &RunConfig, command: &str) -> CliResult<PathBuf> {
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::new(Stage::Report, format!("mkdir {}: {e}", dir.display())))?;
    let t_len = out.prep.x.ncols();
    let n = out.prep.x.nrows();
    let quarters = &out.prep.quarters;

    // Processed panel and deterministic components (always written: the
    // decompose command needs them).
    let xt = DMatrix::from_fn(t_len, n, |t, i| out.prep.x[(i, t)]);
    write_matrix_csv(&dir.join("panel_processed.csv"), &out.prep.ids, Some(quarters), &xt)?;
    write_detrend_csv(&dir.join("detrend.csv"), &out.prep.ids, &out.prep.detrend)?;

    // Parameters.
    let r = out.spec.r;
    let col_names = |prefix: &str, k: usize| -> Vec<String> {
        (1..=k).map(|j| format!("{prefix}{j}")).collect()
    };
    write_matrix_csv(
        &dir.join("params_lambda.csv"),
        &col_names("f", r),
        None,
        &out.em_state.params.lambda,
    )?;
    write_matrix_csv(&dir.join("params_a1.csv"), &col_names("c", r), None, &out.em_state.params.a1)?;
    write_matrix_csv(&dir.join("params_a2.csv"), &col_names("c", r), None, &out.em_state.params.a2)?;
    write_matrix_csv(
        &dir.join("params_h.csv"),
        &col_names("u", out.spec.q),
        None,
        &out.em_state.params.h,
    )?;
    write_idio_csv(&dir.join("params_idio.csv"), &out.prep.ids, &out.em_state.params)?;

    // Log-likelihood path.
    {
        let mut text = String::from("iteration,loglik\n");
        for (k, ll) in out.em_state.loglik_path.iter().enumerate() {
            text.push_str(&format!("{k},{}\n", fmt_num(*ll)));
        }
        csvio::write_file(&dir.join("loglik.csv"), &text)?;
    }

    if cfg.emit.factors {
        let names = state_column_names(&out.spec, &out.em_state.params.rho, &out.prep.ids);
        write_matrix_csv(
            &dir.join("factors_smoothed.csv"),
            &names,
            Some(quarters),
            &out.estimates.f_smoothed,
        )?;
        let chi_t = DMatrix::from_fn(t_len, n, |t, i| out.estimates.chi[(i, t)]);
        write_matrix_csv(&dir.join("chi.csv"), &out.prep.ids, Some(quarters), &chi_t)?;
        let xi_t = DMatrix::from_fn(t_len, n, |t, i| out.estimates.xi[(i, t)]);
        write_matrix_csv(&dir.join("xi.csv"), &out.prep.ids, Some(quarters), &xi_t)?;
    }

    if cfg.emit.mse_trace {
        let mse = DMatrix::from_fn(t_len, 3, |t, j| match j {
            0 => out.mse[t].0,
            1 => out.mse[t].1,
            _ => out.mse[t].2,
        });
        let names = vec![
            "tr_p_predicted".to_string(),
            "tr_p_filtered".to_string(),
            "tr_p_smoothed".to_string(),
        ];
        write_matrix_csv(&dir.join("mse_trace.csv"), &names, Some(quarters), &mse)?;
    }

    if cfg.emit.selection_report {
        write_selection_csv(&dir, &out.resolved.report, &out.prep.ids)?;
    }

    write_tc_artifacts(&dir, out, cfg)?;

    let mut manifest = build_manifest(out, cfg, command);
    manifest.stages_completed = vec![
        "config".into(),
        "ingest".into(),
        "preprocess".into(),
        "select".into(),
        "fit".into(),
        "decompose".into(),
        "report".into(),
    ];
    manifest.save(&dir)?;
    Ok(dir)
}

fn write_tc_artifacts(dir: &Path, out: &FitOutput, cfg: &RunConfig) -> CliResult<()> {
    let quarters = &out.prep.quarters;
    let t_len = out.prep.x.ncols();
    let tc = &out.tc;
    if cfg.emit.trends {
        let k = tc.trends.nrows();
        let data = DMatrix::from_fn(t_len, k, |t, j| tc.trends[(j, t)]);
        let names: Vec<String> = (1..=k).map(|j| format!("trend_{j}")).collect();
        write_matrix_csv(&dir.join("trends.csv"), &names, Some(quarters), &data)?;
        write_matrix_csv(
            &dir.join("tc_phi1.csv"),
            &(1..=k).map(|j| format!("trend_{j}")).collect::<Vec<_>>(),
            None,
            &tc.phi1,
        )?;
    }
    if cfg.emit.cycles {
        let k = tc.cycles.nrows();
        let data = DMatrix::from_fn(t_len, k, |t, j| tc.cycles[(j, t)]);
        let names: Vec<String> = (1..=k).map(|j| format!("cycle_{j}")).collect();
        write_matrix_csv(&dir.join("cycles.csv"), &names, Some(quarters), &data)?;
        let kr = tc.residual_cycles.nrows();
        let resid = DMatrix::from_fn(t_len, kr, |t, j| tc.residual_cycles[(j, t)]);
        let rnames: Vec<String> = (1..=kr).map(|j| format!("resid_{j}")).collect();
        write_matrix_csv(&dir.join("residual_cycles.csv"), &rnames, Some(quarters), &resid)?;
        write_matrix_csv(
            &dir.join("tc_phi0.csv"),
            &(1..=tc.phi0.ncols()).map(|j| format!("g_{j}")).collect::<Vec<_>>(),
            None,
            &tc.phi0,
        )?;
        write_matrix_csv(
            &dir.join("tc_hmat.csv"),
            &(1..=tc.hmat.ncols()).map(|j| format!("cycle_{j}")).collect::<Vec<_>>(),
            None,
            &tc.hmat,
        )?;
    }
    if cfg.emit.per_variable {
        write_per_variable(dir, out)?;
    }
    if cfg.emit.spectra {
        let bandwidth = (t_len as f64).sqrt().floor() as usize;
        let spectra = at_stage(Stage::Report, trendcycle::component_spectra(tc, bandwidth))?;
        let mut names = vec![];
        for j in 1..=spectra.trend.len() {
            names.push(format!("trend_{j}"));
        }
        for j in 1..=spectra.cycle.len() {
            names.push(format!("cycle_{j}"));
        }
        for j in 1..=spectra.residual.len() {
            names.push(format!("resid_{j}"));
        }
        let rows = spectra.freqs.len();
        let cols = names.len();
        let data = DMatrix::from_fn(rows, cols, |h, j| {
            let nt = spectra.trend.len();
            let nc = spectra.cycle.len();
            if j < nt {
                spectra.trend[j][h]
            } else if j < nt + nc {
                spectra.cycle[j - nt][h]
            } else {
                spectra.residual[j - nt - nc][h]
            }
        });
        let mut text = String::from("freq,");
        text.push_str(&names.join(","));
        text.push('\n');
        for h in 0..rows {
            text.push_str(&fmt_num(spectra.freqs[h]));
            for j in 0..cols {
                text.push(',');
                text.push_str(&fmt_num(data[(h, j)]));
            }
            text.push('\n');
        }
        csvio::write_file(&dir.join("spectra.csv"), &text)?;
    }
    Ok(())
}

fn write_per_variable(dir: &Path, out: &FitOutput) -> CliResult<()> {
    let t_len = out.prep.x.ncols();
    let quarters = &out.prep.quarters;
    let sub = dir.join("per_variable");
    for (i, id) in out.prep.ids.iter().enumerate() {
        let lambda_row = RowDVector::from_fn(out.spec.r, |_, j| out.lambda_star[(i, j)]);
        let xi_row: Vec<f64> = (0..t_len).map(|t| out.estimates.xi[(i, t)]).collect();
        let comps = at_stage(
            Stage::Report,
            trendcycle::decompose_variable(&lambda_row, &out.tc, &xi_row, Some(&out.prep.detrend[i])),
        )?;
        let mut text =
            String::from("date,y,deterministic,trend,cycle,residual_cycle,idiosyncratic\n");
        for t in 0..t_len {
            let y = comps.deterministic[t] + out.prep.x[(i, t)];
            text.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                quarters[t],
                fmt_num(y),
                fmt_num(comps.deterministic[t]),
                fmt_num(comps.trend[t]),
                fmt_num(comps.cycle[t]),
                fmt_num(comps.residual_cycle[t]),
                fmt_num(comps.idiosyncratic[t]),
            ));
        }
        csvio::write_file(&sub.join(format!("{id}.csv")), &text)?;
    }
    Ok(())
}

fn write_detrend_csv(path: &Path, ids: &[String], results: &[DetrendResult]) -> CliResult<()> {
    let mut text = String::from("id,mode,a_hat,b_hat,c_hat,statistic,scale_fallback\n");
    for (id, res) in ids.iter().zip(results) {
        let mode = match res.mode_used {
            DetrendKind::Mean => "mean",
            DetrendKind::Trend => "trend",
        };
        text.push_str(&format!(
            "{id},{mode},{},{},{},{},{}\n",
            fmt_num(res.a_hat),
            fmt_num(res.b_hat),
            fmt_num(res.c_hat),
            fmt_num(if res.statistic.is_finite() { res.statistic } else { -1.0 }),
            res.scale_fallback,
        ));
    }
    csvio::write_file(path, &text)
}

fn read_detrend_csv(path: &Path) -> CliResult<Vec<DetrendResult>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(Stage::Ingest, format!("read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 7 {
            return Err(CliError::new(Stage::Ingest, "malformed detrend.csv"));
        }
        let parse = |s: &str| -> CliResult<f64> {
            s.parse()
                .map_err(|_| CliError::new(Stage::Ingest, format!("bad number `{s}` in detrend.csv")))
        };
        out.push(DetrendResult {
            a_hat: parse(cells[2])?,
            b_hat: parse(cells[3])?,
            c_hat: parse(cells[4])?,
            mode_used: if cells[1] == "trend" { DetrendKind::Trend } else { DetrendKind::Mean },
            statistic: parse(cells[5])?,
            scale_fallback: cells[6] == "true",
        });
    }
    Ok(out)
}

fn write_idio_csv(path: &Path, ids: &[String], params: &Params) -> CliResult<()> {
    let mut text = String::from("id,rho,r_var,obs_floor\n");
    for (i, id) in ids.iter().enumerate() {
        text.push_str(&format!(
            "{id},{},{},{}\n",
            u8::from(params.rho[i]),
            fmt_num(params.r_diag[i]),
            fmt_num(params.obs_floor[i]),
        ));
    }
    csvio::write_file(path, &text)
}

fn write_selection_csv(dir: &Path, report: &SelectionReport, ids: &[String]) -> CliResult<()> {
    let mut text = String::from("k,q_share,r_share\n");
    for k in 0..report.table.q_row.len().max(report.table.r_row.len()) {
        let qv = report.table.q_row.get(k).copied().unwrap_or(f64::NAN);
        let rv = report.table.r_row.get(k).copied().unwrap_or(f64::NAN);
        text.push_str(&format!("{},{},{}\n", k + 1, fmt_num(qv), fmt_num(rv)));
    }
    csvio::write_file(&dir.join("selection_report.csv"), &text)?;

    let mut rho_text = String::from("id,rho,forced,adf_stat,adf_lags,cv_5pct\n");
    for (i, decision) in report.rho.iter().enumerate() {
        let (stat, lags, cv) = match &decision.adf {
            Some(a) => (fmt_num(a.statistic), a.lags.to_string(), fmt_num(a.critical_values.1)),
            None => ("".into(), "".into(), "".into()),
        };
        rho_text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            ids[i],
            u8::from(decision.rho),
            decision.forced,
            stat,
            lags,
            cv
        ));
    }
    csvio::write_file(&dir.join("rho.csv"), &rho_text)
}

fn build_manifest(out: &FitOutput, cfg: &RunConfig, command: &str) -> Manifest {
    let mut warnings = out.resolved.report.warnings.clone();
    warnings.extend(out.em_state.notes.clone());
    warnings.extend(out.tc.warnings.clone());
    Manifest {
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        created_unix: Manifest::now_unix(),
        inputs: Inputs {
            panel: cfg.panel.display().to_string(),
            metadata: cfg.metadata.as_ref().map(|p| p.display().to_string()),
            frequency: frequency_name(cfg.frequency).to_string(),
            seed: cfg.seed,
        },
        dims: Dims {
            n: out.prep.x.nrows(),
            t_raw: out.prep.t_raw,
            t: out.prep.x.ncols(),
            q: Some(out.spec.q),
            r: Some(out.spec.r),
            d: Some(out.spec.d),
            state_dim: Some(2 * out.spec.r + out.em_state.params.n_i1()),
            n_i1: Some(out.em_state.params.n_i1()),
        },
        algorithm: Algorithm {
            em_tol: cfg.em_tol,
            em_max_iter: cfg.em_max_iter,
            em_min_iter: cfg.em_min_iter,
            diffuse_scale: cfg.diffuse_scale,
            i1_floor_frac: cfg.i1_floor_frac,
            tol_share: cfg.tol_share,
            bandwidth: Some(out.resolved.bandwidth),
            winsorize: cfg.winsorize,
        },
        selection: Some(Selection {
            q_hat: out.resolved.report.q_hat,
            trend_count_hat: out.resolved.report.trend_count_hat,
            r_hat: out.resolved.report.r_hat,
            d_hat: out.resolved.report.d_hat,
            overridden: out.resolved.overridden.clone(),
        }),
        em: Some(EmSummary {
            iterations: out.em_state.iterations,
            converged: out.em_state.converged,
            loglik: out.em_state.loglik_path.last().copied().unwrap_or(f64::NAN),
            delta_l: out.em_state.delta_l,
        }),
        filter: Some(FilterSummary {
            burn_in: out.burn_in,
            steady_state_trace: out.steady_trace,
            riccati_iterations: out.riccati_iterations,
        }),
        emit: cfg.emit.as_list(),
        stages_completed: Vec::new(),
        warnings,
        error: None,
    }
}

/// Persists a failure manifest so a broken run still leaves diagnostics.
pub fn persist_failure(cfg: &RunConfig, command: &str, err: &CliError, completed: &[Stage]) {
    let mut manifest = Manifest {
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        created_unix: Manifest::now_unix(),
        inputs: Inputs {
            panel: cfg.panel.display().to_string(),
            metadata: cfg.metadata.as_ref().map(|p| p.display().to_string()),
            frequency: frequency_name(cfg.frequency).to_string(),
            seed: cfg.seed,
        },
        ..Manifest::default()
    };
    manifest.stages_completed = completed.iter().map(|s| s.name().to_string()).collect();
    manifest.error = Some(StageFailure {
        stage: err.stage.name().to_string(),
        message: err.message.clone(),
    });
    let _ = manifest.save(&cfg.out_dir);
}

/// `fit` subcommand: full pipeline plus artifacts.
pub fn run_fit(cfg: &RunConfig) -> CliResult<PathBuf> {
    match fit(cfg) {
        Ok(out) => write_fit_artifacts(&out, cfg, "fit"),
        Err(err) => {
            persist_failure(cfg, "fit", &err, &[]);
            Err(err)
        }
    }
}

/// `select` subcommand: preprocessing and the selection criteria only.
pub fn run_select(cfg: &RunConfig) -> CliResult<PathBuf> {
    at_stage(Stage::Config, cfg.validate().map_err(|e| e.message))?;
    let panel = read_panel_csv(&cfg.panel)?;
    let metas = match &cfg.metadata {
        Some(path) => align_metadata(csvio::read_metadata_csv(path)?, &panel.ids)?,
        None => panel.ids.iter().map(|id| SeriesMeta::new(id.clone())).collect(),
    };
    let prep = prepare(&panel, metas, cfg)?;
    let resolved = resolve_selection(&prep, cfg)?;

    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::new(Stage::Report, format!("mkdir {}: {e}", dir.display())))?;
    write_selection_csv(&dir, &resolved.report, &prep.ids)?;

    let mut manifest = Manifest {
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        command: "select".to_string(),
        created_unix: Manifest::now_unix(),
        inputs: Inputs {
            panel: cfg.panel.display().to_string(),
            metadata: cfg.metadata.as_ref().map(|p| p.display().to_string()),
            frequency: frequency_name(cfg.frequency).to_string(),
            seed: cfg.seed,
        },
        dims: Dims {
            n: prep.x.nrows(),
            t_raw: prep.t_raw,
            t: prep.x.ncols(),
            q: Some(resolved.report.q_hat),
            r: Some(resolved.report.r_hat),
            d: Some(resolved.report.d_hat),
            state_dim: None,
            n_i1: Some(resolved.rho.iter().filter(|&&b| b).count()),
        },
        algorithm: Algorithm {
            em_tol: cfg.em_tol,
            em_max_iter: cfg.em_max_iter,
            em_min_iter: cfg.em_min_iter,
            diffuse_scale: cfg.diffuse_scale,
            i1_floor_frac: cfg.i1_floor_frac,
            tol_share: cfg.tol_share,
            bandwidth: Some(resolved.bandwidth),
            winsorize: cfg.winsorize,
        },
        selection: Some(Selection {
            q_hat: resolved.report.q_hat,
            trend_count_hat: resolved.report.trend_count_hat,
            r_hat: resolved.report.r_hat,
            d_hat: resolved.report.d_hat,
            overridden: resolved.overridden.clone(),
        }),
        em: None,
        filter: None,
        emit: vec!["selection_report".into()],
        stages_completed: vec![
            "config".into(),
            "ingest".into(),
            "preprocess".into(),
            "select".into(),
        ],
        warnings: resolved.report.warnings.clone(),
        error: None,
    };
    manifest.emit = vec!["selection_report".into()];
    manifest.save(&dir)?;
    Ok(dir)
}

/// `decompose` subcommand: re-runs the trend-cycle split of a persisted fit
/// with possibly different q / d, without re-estimating.
pub fn run_decompose(
    fit_dir: &Path,
    out_dir: &Path,
    q_override: Option<usize>,
    d_override: Option<usize>,
    emit: &EmitFlags,
) -> CliResult<PathBuf> {
    let manifest = Manifest::load(fit_dir)?;
    let q = q_override
        .or(manifest.dims.q)
        .ok_or_else(|| CliError::new(Stage::Config, "fit manifest lacks q and no override given"))?;
    let d = d_override
        .or(manifest.dims.d)
        .ok_or_else(|| CliError::new(Stage::Config, "fit manifest lacks d and no override given"))?;
    let r = manifest
        .dims
        .r
        .ok_or_else(|| CliError::new(Stage::Config, "fit manifest lacks r"))?;

    let (ids, x_t) = read_matrix_csv(&fit_dir.join("panel_processed.csv"))?;
    let (_, factors_t) = read_matrix_csv(&fit_dir.join("factors_smoothed.csv"))?;
    let (_, lambda) = read_matrix_csv(&fit_dir.join("params_lambda.csv"))?;
    let detrend = read_detrend_csv(&fit_dir.join("detrend.csv"))?;
    let quarters = read_quarters(&fit_dir.join("panel_processed.csv"))?;

    let t_len = x_t.nrows();
    let n = ids.len();
    if factors_t.ncols() < r {
        return Err(CliError::new(
            Stage::Ingest,
            "persisted factors have fewer columns than r",
        ));
    }
    let f_raw = DMatrix::from_fn(r, t_len, |j, t| factors_t[(t, j)]);
    let lam_raw = DMatrix::from_fn(n, r, |i, j| lambda[(i, j)]);
    let (lambda_norm, f_block) =
        at_stage(Stage::Decompose, trendcycle::normalize_loadings(&lam_raw, &f_raw))?;
    let tc = at_stage(Stage::Decompose, trendcycle::decompose_factors(&f_block, q, d))?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::new(Stage::Report, format!("mkdir {}: {e}", out_dir.display())))?;

    // Rebuild the pieces write_tc_artifacts needs from the persisted fit.
    let x = DMatrix::from_fn(n, t_len, |i, t| x_t[(t, i)]);
    let chi = &lambda_norm * &f_block;
    let xi = &x - &chi;

    if emit.trends {
        let k = tc.trends.nrows();
        let data = DMatrix::from_fn(t_len, k, |t, j| tc.trends[(j, t)]);
        let names: Vec<String> = (1..=k).map(|j| format!("trend_{j}")).collect();
        write_matrix_csv(&out_dir.join("trends.csv"), &names, Some(&quarters), &data)?;
    }
    if emit.cycles {
        let k = tc.cycles.nrows();
        let data = DMatrix::from_fn(t_len, k, |t, j| tc.cycles[(j, t)]);
        let names: Vec<String> = (1..=k).map(|j| format!("cycle_{j}")).collect();
        write_matrix_csv(&out_dir.join("cycles.csv"), &names, Some(&quarters), &data)?;
        let kr = tc.residual_cycles.nrows();
        let resid = DMatrix::from_fn(t_len, kr, |t, j| tc.residual_cycles[(j, t)]);
        let rnames: Vec<String> = (1..=kr).map(|j| format!("resid_{j}")).collect();
        write_matrix_csv(&out_dir.join("residual_cycles.csv"), &rnames, Some(&quarters), &resid)?;
    }
    if emit.per_variable {
        let sub = out_dir.join("per_variable");
        for (i, id) in ids.iter().enumerate() {
            let lambda_row = RowDVector::from_fn(r, |_, j| lambda_norm[(i, j)]);
            let xi_row: Vec<f64> = (0..t_len).map(|t| xi[(i, t)]).collect();
            let comps = at_stage(
                Stage::Report,
                trendcycle::decompose_variable(&lambda_row, &tc, &xi_row, Some(&detrend[i])),
            )?;
            let mut text =
                String::from("date,y,deterministic,trend,cycle,residual_cycle,idiosyncratic\n");
            for t in 0..t_len {
                let y = comps.deterministic[t] + x[(i, t)];
                text.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    quarters[t],
                    fmt_num(y),
                    fmt_num(comps.deterministic[t]),
                    fmt_num(comps.trend[t]),
                    fmt_num(comps.cycle[t]),
                    fmt_num(comps.residual_cycle[t]),
                    fmt_num(comps.idiosyncratic[t]),
                ));
            }
            csvio::write_file(&sub.join(format!("{id}.csv")), &text)?;
        }
    }

    let mut out_manifest = manifest.clone();
    out_manifest.command = "decompose".into();
    out_manifest.created_unix = Manifest::now_unix();
    out_manifest.dims.q = Some(q);
    out_manifest.dims.d = Some(d);
    out_manifest.emit = emit.as_list();
    out_manifest.warnings = tc.warnings.clone();
    out_manifest.save(out_dir)?;
    Ok(out_dir.to_path_buf())
}

fn read_quarters(path: &Path) -> CliResult<Vec<Quarter>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(Stage::Ingest, format!("read {}: {e}", path.display())))?;
    let mut quarters = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let date = line.split(',').next().unwrap_or_default();
        let parsed = csvio::parse_date(date)
            .map_err(|e| CliError::new(Stage::Ingest, format!("{}: {e}", path.display())))?;
        quarters.push(parsed.quarter());
    }
    Ok(quarters)
}

/// `report` subcommand: copies the enabled artifacts of a fit directory to
/// a new location, nothing else.
pub fn run_report(fit_dir: &Path, out_dir: &Path, emit: &EmitFlags) -> CliResult<PathBuf> {
    let manifest = Manifest::load(fit_dir)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::new(Stage::Report, format!("mkdir {}: {e}", out_dir.display())))?;
    let mut files: Vec<&str> = Vec::new();
    if emit.factors {
        files.extend(["factors_smoothed.csv", "chi.csv", "xi.csv"]);
    }
    if emit.trends {
        files.extend(["trends.csv", "tc_phi1.csv"]);
    }
    if emit.cycles {
        files.extend(["cycles.csv", "residual_cycles.csv", "tc_phi0.csv", "tc_hmat.csv"]);
    }
    if emit.mse_trace {
        files.push("mse_trace.csv");
    }
    if emit.spectra {
        files.push("spectra.csv");
    }
    if emit.selection_report {
        files.extend(["selection_report.csv", "rho.csv"]);
    }
    for name in files {
        let src = fit_dir.join(name);
        if !src.exists() {
            return Err(CliError::new(
                Stage::Report,
                format!("fit directory lacks `{name}` (was it emitted?)"),
            ));
        }
        std::fs::copy(&src, out_dir.join(name))
            .map_err(|e| CliError::new(Stage::Report, format!("copy {name}: {e}")))?;
    }
    if emit.per_variable {
        let src = fit_dir.join("per_variable");
        if !src.is_dir() {
            return Err(CliError::new(Stage::Report, "fit directory lacks per_variable/"));
        }
        let dst = out_dir.join("per_variable");
        std::fs::create_dir_all(&dst)
            .map_err(|e| CliError::new(Stage::Report, format!("mkdir per_variable: {e}")))?;
        for entry in std::fs::read_dir(&src)
            .map_err(|e| CliError::new(Stage::Report, format!("read per_variable: {e}")))?
        {
            let entry = entry.map_err(|e| CliError::new(Stage::Report, e.to_string()))?;
            std::fs::copy(entry.path(), dst.join(entry.file_name()))
                .map_err(|e| CliError::new(Stage::Report, format!("copy: {e}")))?;
        }
    }
    let mut out_manifest = manifest;
    out_manifest.command = "report".into();
    out_manifest.created_unix = Manifest::now_unix();
    out_manifest.emit = emit.as_list();
    out_manifest.save(out_dir)?;
    Ok(out_dir.to_path_buf())
}

/// Settings for the `simulate` subcommand.
#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub n: usize,
    pub t_len: usize,
    pub r: usize,
    pub q: usize,
    pub d: usize,
    pub snr: f64,
    pub i1_share: f64,
    pub idio_ar: f64,
    pub balanced_shocks: bool,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// `simulate` subcommand: writes a synthetic panel in the pipeline's input
/// format plus the ground truth behind it. Byte-identical for a fixed seed.
pub fn run_simulate(args: &SimulateArgs) -> CliResult<PathBuf> {
    let mut dgp = DgpConfig::new(args.n, args.t_len, args.r, args.q, args.d, args.seed);
    dgp.snr = args.snr;
    dgp.i1_share = args.i1_share;
    dgp.idio_ar = args.idio_ar;
    dgp.balanced_shocks = args.balanced_shocks;
    let (x, truth) = at_stage(Stage::Config, gen_dfm(&dgp))?;

    let dir = args.out_dir.clone();
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::new(Stage::Report, format!("mkdir {}: {e}", dir.display())))?;

    let ids: Vec<String> = (1..=args.n).map(|i| format!("s{i:03}")).collect();
    let quarters = synthetic_quarters(args.t_len);
    let xt = DMatrix::from_fn(args.t_len, args.n, |t, i| x[(i, t)]);
    write_matrix_csv(&dir.join("panel.csv"), &ids, Some(&quarters), &xt)?;

    // Metadata template: no transforms, automatic rules.
    let mut meta = String::from("id,transform,sa,detrend,rho,tie_group\n");
    for id in &ids {
        meta.push_str(&format!("{id},none,1,auto,auto,\n"));
    }
    csvio::write_file(&dir.join("metadata.csv"), &meta)?;

    let truth_dir = dir.join("truth");
    let f_t = DMatrix::from_fn(args.t_len, args.r, |t, j| truth.f_static[(j, t)]);
    let fnames: Vec<String> = (1..=args.r).map(|j| format!("f{j}")).collect();
    write_matrix_csv(&truth_dir.join("factors.csv"), &fnames, Some(&quarters), &f_t)?;
    write_matrix_csv(&truth_dir.join("lambda.csv"), &fnames, None, &truth.lambda)?;
    let tau_t = DMatrix::from_fn(args.t_len, truth.tau.nrows(), |t, j| truth.tau[(j, t)]);
    let tnames: Vec<String> = (1..=truth.tau.nrows()).map(|j| format!("tau{j}")).collect();
    write_matrix_csv(&truth_dir.join("trends.csv"), &tnames, Some(&quarters), &tau_t)?;
    let cyc_t = DMatrix::from_fn(args.t_len, truth.cycles.nrows(), |t, j| truth.cycles[(j, t)]);
    let cnames: Vec<String> = (1..=truth.cycles.nrows()).map(|j| format!("c{j}")).collect();
    write_matrix_csv(&truth_dir.join("cycles.csv"), &cnames, Some(&quarters), &cyc_t)?;
    let chi_t = DMatrix::from_fn(args.t_len, args.n, |t, i| truth.chi[(i, t)]);
    write_matrix_csv(&truth_dir.join("chi.csv"), &ids, Some(&quarters), &chi_t)?;
    let xi_t = DMatrix::from_fn(args.t_len, args.n, |t, i| truth.xi[(i, t)]);
    write_matrix_csv(&truth_dir.join("xi.csv"), &ids, Some(&quarters), &xi_t)?;
    let mut rho_text = String::from("id,rho\n");
    for (i, id) in ids.iter().enumerate() {
        rho_text.push_str(&format!("{id},{}\n", u8::from(truth.rho[i])));
    }
    csvio::write_file(&truth_dir.join("rho.csv"), &rho_text)?;
    Ok(dir)
}

/// Quarterly labels starting at 1960Q1.
pub fn synthetic_quarters(t_len: usize) -> Vec<Quarter> {
    let mut quarters = Vec::with_capacity(t_len);
    let mut q = Quarter { year: 1960, q: 1 };
    for _ in 0..t_len {
        quarters.push(q);
        q = q.next();
    }
    quarters
}

/// Convenience wrapper used by tests: ingest + preprocess with defaults.
pub fn load_and_prepare(cfg: &RunConfig) -> CliResult<Prepared> {
    let panel = read_panel_csv(&cfg.panel)?;
    let metas = match &cfg.metadata {
        Some(path) => align_metadata(csvio::read_metadata_csv(path)?, &panel.ids)?,
        None => panel.ids.iter().map(|id| SeriesMeta::new(id.clone())).collect(),
    };
    prepare(&panel, metas, cfg)
}
