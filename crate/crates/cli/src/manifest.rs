//! Machine-readable run manifest: every resolved setting, dimension, and
//! stage outcome of a run, written as JSON next to the artifacts.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult, Stage};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub package_version: String,
    pub command: String,
    /// Wall-clock timestamp (seconds since the epoch). The only field
    /// allowed to differ between identically configured runs.
    pub created_unix: u64,
    pub inputs: Inputs,
    pub dims: Dims,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub selection: Option<Selection>,
    #[serde(default)]
    pub em: Option<EmSummary>,
    #[serde(default)]
    pub filter: Option<FilterSummary>,
    pub emit: Vec<String>,
    pub stages_completed: Vec<String>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub error: Option<StageFailure>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Inputs {
    pub panel: String,
    #[serde(default)]
    pub metadata: Option<String>,
    pub frequency: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Dims {
    pub n: usize,
    pub t_raw: usize,
    pub t: usize,
    #[serde(default)]
    pub q: Option<usize>,
    #[serde(default)]
    pub r: Option<usize>,
    #[serde(default)]
    pub d: Option<usize>,
    #[serde(default)]
    pub state_dim: Option<usize>,
    #[serde(default)]
    pub n_i1: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Algorithm {
    pub em_tol: f64,
    pub em_max_iter: usize,
    pub em_min_iter: usize,
    pub diffuse_scale: f64,
    pub i1_floor_frac: f64,
    pub tol_share: f64,
    #[serde(default)]
    pub bandwidth: Option<usize>,
    #[serde(default)]
    pub winsorize: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Selection {
    pub q_hat: usize,
    pub trend_count_hat: usize,
    pub r_hat: usize,
    pub d_hat: usize,
    /// Which of q/r/d came from overrides rather than the criteria.
    pub overridden: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EmSummary {
    pub iterations: usize,
    pub converged: bool,
    pub loglik: f64,
    pub delta_l: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct FilterSummary {
    pub burn_in: usize,
    pub steady_state_trace: f64,
    pub riccati_iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join("manifest.json");
        fs::create_dir_all(dir)
            .map_err(|e| CliError::new(Stage::Report, format!("mkdir {}: {e}", dir.display())))?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::new(Stage::Report, format!("serialize manifest: {e}")))?;
        fs::write(&path, json)
            .map_err(|e| CliError::new(Stage::Report, format!("write {}: {e}", path.display())))
    }

    pub fn load(dir: &Path) -> CliResult<Manifest> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| CliError::new(Stage::Ingest, format!("read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::new(Stage::Ingest, format!("parse {}: {e}", path.display())))
    }

    pub fn now_unix() -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_json() {
        let mut m = Manifest::default();
        m.command = "fit".into();
        m.dims.n = 10;
        m.selection = Some(Selection {
            q_hat: 3,
            trend_count_hat: 1,
            r_hat: 6,
            d_hat: 2,
            overridden: vec!["q".into()],
        });
        let dir = std::env::temp_dir().join("dfm_manifest_test");
        m.save(&dir).unwrap();
        let back = Manifest::load(&dir).unwrap();
        assert_eq!(back.dims.n, 10);
        assert_eq!(back.selection.unwrap().r_hat, 6);
    }
}
