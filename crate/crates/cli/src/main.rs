use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dfm_cli::config::{EmitFlags, RunConfig};
use dfm_cli::pipeline::{self, SimulateArgs};
use dfm_cli::{CliError, Stage};

/// Non-stationary dynamic factor models: estimation and trend-cycle
/// decomposition on large time-series panels.
#[derive(Parser)]
#[command(name = "dfm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the model on a panel and write all artifacts.
    Fit(RunArgs),
    /// Run only the selection criteria (q, trends, r, unit roots).
    Select(RunArgs),
    /// Re-run the trend-cycle split of a fitted model directory.
    Decompose(DecomposeArgs),
    /// Copy the enabled artifacts of a fit directory.
    Report(ReportArgs),
    /// Generate a synthetic panel with known ground truth.
    Simulate(SimArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file (sectioned key = value format).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input panel CSV (overrides the config file).
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Per-series metadata CSV.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Input frequency: quarterly, monthly, or daily.
    #[arg(long)]
    frequency: Option<String>,
    /// Fix the number of dynamic shocks instead of selecting it.
    #[arg(long)]
    q: Option<usize>,
    /// Fix the number of static factors.
    #[arg(long)]
    r: Option<usize>,
    /// Fix the cointegration deficit (q - d common trends).
    #[arg(long)]
    d: Option<usize>,
    /// Search bound for the number of dynamic shocks.
    #[arg(long)]
    q_max: Option<usize>,
    /// Search bound for the number of static factors.
    #[arg(long)]
    r_max: Option<usize>,
    /// Search bound for the number of common trends.
    #[arg(long)]
    trend_kmax: Option<usize>,
    /// Share-matching tolerance (percentage points) for selecting r.
    #[arg(long)]
    tol_share: Option<f64>,
    /// Lag-window half-width for spectral estimates.
    #[arg(long)]
    bandwidth: Option<usize>,
    /// Winsorizing threshold in interquartile ranges (off by default).
    #[arg(long)]
    winsorize: Option<f64>,
    /// Maximum autocovariance lag in the detrending drift statistic.
    #[arg(long)]
    detrend_max_lag: Option<usize>,
    /// Minimum likelihood evaluations before the EM stopping rule fires.
    #[arg(long)]
    em_min_iter: Option<usize>,
    /// EM convergence threshold.
    #[arg(long)]
    em_tol: Option<f64>,
    /// Maximum EM iterations.
    #[arg(long)]
    em_max_iter: Option<usize>,
    /// Diffuse initialization scale.
    #[arg(long)]
    diffuse_scale: Option<f64>,
    /// Measurement floor fraction for I(1) idiosyncratic series.
    #[arg(long)]
    i1_floor_frac: Option<f64>,
    /// Random seed recorded in the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated artifact families to emit.
    #[arg(long)]
    emit: Option<String>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.panel {
            cfg.panel = p;
        }
        if let Some(m) = self.metadata {
            cfg.metadata = Some(m);
        }
        if let Some(f) = self.frequency {
            cfg.frequency = match f.to_lowercase().as_str() {
                "quarterly" | "q" => dfm_core::preprocess::Frequency::Quarterly,
                "monthly" | "m" => dfm_core::preprocess::Frequency::Monthly,
                "daily" | "d" => dfm_core::preprocess::Frequency::Daily,
                other => {
                    return Err(CliError::new(
                        Stage::Config,
                        format!("unknown frequency `{other}`"),
                    ))
                }
            };
        }
        if self.q.is_some() {
            cfg.q = self.q;
        }
        if self.r.is_some() {
            cfg.r = self.r;
        }
        if self.d.is_some() {
            cfg.d = self.d;
        }
        if let Some(v) = self.em_tol {
            cfg.em_tol = v;
        }
        if let Some(v) = self.em_max_iter {
            cfg.em_max_iter = v;
        }
        if let Some(v) = self.em_min_iter {
            cfg.em_min_iter = v;
        }
        if let Some(v) = self.q_max {
            cfg.q_max = v;
        }
        if let Some(v) = self.r_max {
            cfg.r_max = v;
        }
        if let Some(v) = self.trend_kmax {
            cfg.trend_kmax = v;
        }
        if let Some(v) = self.tol_share {
            cfg.tol_share = v;
        }
        if self.bandwidth.is_some() {
            cfg.bandwidth = self.bandwidth;
        }
        if self.winsorize.is_some() {
            cfg.winsorize = self.winsorize;
        }
        if self.detrend_max_lag.is_some() {
            cfg.detrend_max_lag = self.detrend_max_lag;
        }
        if let Some(v) = self.diffuse_scale {
            cfg.diffuse_scale = v;
        }
        if let Some(v) = self.i1_floor_frac {
            cfg.i1_floor_frac = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.out {
            cfg.out_dir = v;
        }
        if let Some(v) = self.emit {
            cfg.emit = EmitFlags::parse(&v).map_err(|e| CliError::new(Stage::Config, e))?;
        }
        cfg.apply_env();
        Ok(cfg)
    }
}

#[derive(Args)]
struct DecomposeArgs {
    /// Directory of a previous `fit` run.
    #[arg(long)]
    fit_dir: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the number of dynamic shocks.
    #[arg(long)]
    q: Option<usize>,
    /// Override the cointegration deficit.
    #[arg(long)]
    d: Option<usize>,
    /// Comma-separated artifact families to emit.
    #[arg(long)]
    emit: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of a previous `fit` run.
    #[arg(long)]
    fit_dir: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated artifact families to copy.
    #[arg(long)]
    emit: Option<String>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long = "t", default_value_t = 230)]
    t_len: usize,
    #[arg(long, default_value_t = 6)]
    r: usize,
    #[arg(long, default_value_t = 3)]
    q: usize,
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Per-series signal-to-noise ratio in differences.
    #[arg(long, default_value_t = 2.0)]
    snr: f64,
    /// Share of series with random-walk idiosyncratic components.
    #[arg(long, default_value_t = 0.0)]
    i1_share: f64,
    /// AR coefficient of stationary idiosyncratic components.
    #[arg(long, default_value_t = 0.5)]
    idio_ar: f64,
    /// Give every dynamic shock comparable spectral mass.
    #[arg(long, default_value_t = false)]
    balanced: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn real_main() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Fit(args) => {
            let cfg = args.into_config()?;
            let dir = pipeline::run_fit(&cfg)?;
            println!("fit written to {}", dir.display());
        }
        Command::Select(args) => {
            let cfg = args.into_config()?;
            let dir = pipeline::run_select(&cfg)?;
            println!("selection written to {}", dir.display());
        }
        Command::Decompose(args) => {
            let emit = match &args.emit {
                Some(list) => EmitFlags::parse(list).map_err(|e| CliError::new(Stage::Config, e))?,
                None => EmitFlags::default(),
            };
            let dir = pipeline::run_decompose(&args.fit_dir, &args.out, args.q, args.d, &emit)?;
            println!("decomposition written to {}", dir.display());
        }
        Command::Report(args) => {
            let emit = match &args.emit {
                Some(list) => EmitFlags::parse(list).map_err(|e| CliError::new(Stage::Config, e))?,
                None => EmitFlags::default(),
            };
            let dir = pipeline::run_report(&args.fit_dir, &args.out, &emit)?;
            println!("report written to {}", dir.display());
        }
        Command::Simulate(args) => {
            let sim = SimulateArgs {
                n: args.n,
                t_len: args.t_len,
                r: args.r,
                q: args.q,
                d: args.d,
                snr: args.snr,
                i1_share: args.i1_share,
                idio_ar: args.idio_ar,
                balanced_shocks: args.balanced,
                seed: args.seed,
                out_dir: args.out,
            };
            let dir = pipeline::run_simulate(&sim)?;
            println!("synthetic panel written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error {err}");
            ExitCode::from(err.stage.exit_code() as u8)
        }
    }
}
