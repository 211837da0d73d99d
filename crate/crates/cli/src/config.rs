//! Run configuration: a flat key-value file with sections, mirrored
//! one-to-one by command-line flags. The only environment override is the
//! output directory (`DFM_OUTPUT_DIR`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dfm_core::preprocess::Frequency;

use crate::{CliError, CliResult, Stage};

/// Which artifact families to write.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmitFlags {
    pub factors: bool,
    pub trends: bool,
    pub cycles: bool,
    pub per_variable: bool,
    pub mse_trace: bool,
    pub spectra: bool,
    pub selection_report: bool,
}

impl Default for EmitFlags {
    fn default() -> Self {
        EmitFlags {
            factors: true,
            trends: true,
            cycles: true,
            per_variable: true,
            mse_trace: true,
            spectra: true,
            selection_report: true,
        }
    }
}

impl EmitFlags {
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut flags = EmitFlags {
            factors: false,
            trends: false,
            cycles: false,
            per_variable: false,
            mse_trace: false,
            spectra: false,
            selection_report: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "factors" => flags.factors = true,
                "trends" => flags.trends = true,
                "cycles" => flags.cycles = true,
                "per_variable" => flags.per_variable = true,
                "mse_trace" => flags.mse_trace = true,
                "spectra" => flags.spectra = true,
                "selection_report" => flags.selection_report = true,
                "all" => flags = EmitFlags::default(),
                other => return Err(format!("unknown emit flag `{other}`")),
            }
        }
        Ok(flags)
    }

    pub fn as_list(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.factors {
            v.push("factors".into());
        }
        if self.trends {
            v.push("trends".into());
        }
        if self.cycles {
            v.push("cycles".into());
        }
        if self.per_variable {
            v.push("per_variable".into());
        }
        if self.mse_trace {
            v.push("mse_trace".into());
        }
        if self.spectra {
            v.push("spectra".into());
        }
        if self.selection_report {
            v.push("selection_report".into());
        }
        v
    }
}

/// Resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub panel: PathBuf,
    pub metadata: Option<PathBuf>,
    pub frequency: Frequency,
    /// Dimension overrides; `None` means select from the data.
    pub q: Option<usize>,
    pub r: Option<usize>,
    pub d: Option<usize>,
    pub q_max: usize,
    pub r_max: usize,
    pub trend_kmax: usize,
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub em_min_iter: usize,
    pub diffuse_scale: f64,
    pub i1_floor_frac: f64,
    pub tol_share: f64,
    pub bandwidth: Option<usize>,
    pub detrend_max_lag: Option<usize>,
    /// Winsorizing threshold in interquartile ranges; off when `None`.
    pub winsorize: Option<f64>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub emit: EmitFlags,
    /// Tie groups declared in the config file, `name -> member ids`
    /// (merged with the metadata column).
    pub ties: Vec<(String, Vec<String>)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            panel: PathBuf::new(),
            metadata: None,
            frequency: Frequency::Quarterly,
            q: None,
            r: None,
            d: None,
            q_max: 8,
            r_max: 10,
            trend_kmax: 6,
            em_tol: 1e-6,
            em_max_iter: 500,
            em_min_iter: 2,
            diffuse_scale: 1e7,
            i1_floor_frac: 1e-4,
            tol_share: 1.0,
            bandwidth: None,
            detrend_max_lag: None,
            winsorize: None,
            seed: 42,
            out_dir: PathBuf::from("out"),
            emit: EmitFlags::default(),
            ties: Vec::new(),
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::new(Stage::Config, msg)
}

/// Parsed key-value file: `section.key -> value`.
pub fn parse_ini(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_lowercase();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", no + 1))?;
        let full = if section.is_empty() {
            key.trim().to_lowercase()
        } else {
            format!("{section}.{}", key.trim().to_lowercase())
        };
        map.insert(full, value.trim().to_string());
    }
    Ok(map)
}

fn parse_opt_usize(v: &str, what: &str) -> CliResult<Option<usize>> {
    if v.eq_ignore_ascii_case("auto") || v.is_empty() {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|_| cfg_err(format!("{what}: expected integer or `auto`, got `{v}`")))
}

impl RunConfig {
    /// Loads a config file and applies the environment output-dir override.
    pub fn from_file(path: &Path) -> CliResult<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        let map = parse_ini(&text).map_err(cfg_err)?;
        let mut cfg = RunConfig::default();

        for (key, value) in &map {
            match key.as_str() {
                "data.panel" => cfg.panel = PathBuf::from(value),
                "data.metadata" => cfg.metadata = Some(PathBuf::from(value)),
                "data.frequency" => {
                    cfg.frequency = match value.to_lowercase().as_str() {
                        "quarterly" | "q" => Frequency::Quarterly,
                        "monthly" | "m" => Frequency::Monthly,
                        "daily" | "d" => Frequency::Daily,
                        other => return Err(cfg_err(format!("unknown frequency `{other}`"))),
                    }
                }
                "model.q" => cfg.q = parse_opt_usize(value, "model.q")?,
                "model.r" => cfg.r = parse_opt_usize(value, "model.r")?,
                "model.d" => cfg.d = parse_opt_usize(value, "model.d")?,
                "model.q_max" => cfg.q_max = value.parse().map_err(|_| cfg_err("bad q_max"))?,
                "model.r_max" => cfg.r_max = value.parse().map_err(|_| cfg_err("bad r_max"))?,
                "model.trend_kmax" => {
                    cfg.trend_kmax = value.parse().map_err(|_| cfg_err("bad trend_kmax"))?
                }
                "algorithm.em_tol" => cfg.em_tol = value.parse().map_err(|_| cfg_err("bad em_tol"))?,
                "algorithm.em_max_iter" => {
                    cfg.em_max_iter = value.parse().map_err(|_| cfg_err("bad em_max_iter"))?
                }
                "algorithm.em_min_iter" => {
                    cfg.em_min_iter = value.parse().map_err(|_| cfg_err("bad em_min_iter"))?
                }
                "algorithm.diffuse_scale" => {
                    cfg.diffuse_scale = value.parse().map_err(|_| cfg_err("bad diffuse_scale"))?
                }
                "algorithm.i1_floor_frac" => {
                    cfg.i1_floor_frac = value.parse().map_err(|_| cfg_err("bad i1_floor_frac"))?
                }
                "algorithm.tol_share" => {
                    cfg.tol_share = value.parse().map_err(|_| cfg_err("bad tol_share"))?
                }
                "algorithm.bandwidth" => {
                    cfg.bandwidth = parse_opt_usize(value, "algorithm.bandwidth")?
                }
                "algorithm.detrend_max_lag" => {
                    cfg.detrend_max_lag = parse_opt_usize(value, "algorithm.detrend_max_lag")?
                }
                "algorithm.winsorize" => {
                    cfg.winsorize = if value.eq_ignore_ascii_case("off") {
                        None
                    } else {
                        Some(value.parse().map_err(|_| cfg_err("bad winsorize"))?)
                    }
                }
                "algorithm.seed" => cfg.seed = value.parse().map_err(|_| cfg_err("bad seed"))?,
                "output.dir" => cfg.out_dir = PathBuf::from(value),
                "output.emit" => cfg.emit = EmitFlags::parse(value).map_err(cfg_err)?,
                other if other.starts_with("ties.") => {
                    let name = other.trim_start_matches("ties.").to_string();
                    let members: Vec<String> =
                        value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                    cfg.ties.push((name, members));
                }
                other => return Err(cfg_err(format!("unknown config key `{other}`"))),
            }
        }
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var("DFM_OUTPUT_DIR") {
            if !dir.is_empty() {
                self.out_dir = PathBuf::from(dir);
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.panel.as_os_str().is_empty() {
            return Err(cfg_err("no input panel given (data.panel / --panel)"));
        }
        if let (Some(q), Some(d)) = (self.q, self.d) {
            if d == 0 || d >= q {
                return Err(cfg_err(format!("need 0 < d < q, got q = {q}, d = {d}")));
            }
        }
        if let (Some(q), Some(r)) = (self.q, self.r) {
            if q > r {
                return Err(cfg_err(format!("need q <= r, got q = {q}, r = {r}")));
            }
        }
        if self.em_tol <= 0.0 || self.diffuse_scale <= 0.0 || self.i1_floor_frac <= 0.0 {
            return Err(cfg_err("tolerances and scales must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ini_sections_and_comments() {
        let text = "# comment\n[data]\npanel = p.csv\n[model]\nq = 3\nr = auto\n[ties]\nGDO = A, B\n";
        let map = parse_ini(text).unwrap();
        assert_eq!(map.get("data.panel").unwrap(), "p.csv");
        assert_eq!(map.get("model.q").unwrap(), "3");
        assert_eq!(map.get("ties.gdo").unwrap(), "A, B");
    }

    #[test]
    fn emit_flags_round_trip() {
        let flags = EmitFlags::parse("factors,spectra").unwrap();
        assert!(flags.factors && flags.spectra);
        assert!(!flags.trends);
        assert_eq!(flags.as_list(), vec!["factors".to_string(), "spectra".to_string()]);
        assert!(EmitFlags::parse("bogus").is_err());
    }

    #[test]
    fn config_file_parses_and_validates() {
        let dir = std::env::temp_dir().join("dfm_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.ini");
        std::fs::write(
            &path,
            "[data]\npanel = panel.csv\nfrequency = quarterly\n[model]\nq = 3\nd = 2\n[algorithm]\nseed = 7\n[output]\ndir = outdir\nemit = factors,trends\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.q, Some(3));
        assert_eq!(cfg.d, Some(2));
        assert_eq!(cfg.seed, 7);
        assert!(cfg.emit.factors && cfg.emit.trends && !cfg.emit.spectra);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.panel = PathBuf::from("x.csv");
        cfg.q = Some(2);
        cfg.d = Some(2);
        assert!(cfg.validate().is_err());
    }
}
