//! Experiment configuration (TOML).
//!
//! ```toml
//! out_dir = "results"
//! strategies = ["single", "mix", "fed"]
//! seeds = [0, 1, 2]
//! k = 5
//! tau_grid = [5, 10, 20, 30]
//! noise_grid = [
//!     { mechanism = "gaussian", alpha = 0.01 },
//!     { mechanism = "laplace", alpha = 0.01 },
//! ]
//!
//! [data]
//! source = "synth"          # or "csv" with roi_dir, phenotype, window, stride
//!
//! [data.synth]
//! n_rois = 30
//! subjects_per_class = 20
//!
//! [train.fed]
//! epochs = 50
//! tau = 20
//! noise = { mechanism = "gaussian", alpha = 0.01 }
//!
//! [interpret]
//! strategies = ["fed", "single"]
//! k = 10
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::federation::{StrategyConfig, StrategyKind};
use crate::interpret::SaliencyMode;
use crate::privacy::NoiseSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Synth,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataKind,
    /// Directory of per-subject ROI CSV files (`csv` source).
    pub roi_dir: Option<PathBuf>,
    /// Phenotype CSV with `subject_id, site_id, label` (`csv` source).
    pub phenotype: Option<PathBuf>,
    /// Sliding-window length and stride for the `csv` source; the synthetic
    /// source uses the values in `synth`.
    pub window: usize,
    pub stride: usize,
    /// Synthetic generator; its seed is offset by each experiment seed.
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataKind::Synth,
            roi_dir: None,
            phenotype: None,
            window: 32,
            stride: 1,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub strategies: Vec<StrategyKind>,
    pub k: usize,
    pub mode: SaliencyMode,
    /// Optional `index,name` CSV used to annotate ROI rows.
    pub atlas_labels: Option<PathBuf>,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            strategies: vec![StrategyKind::Fed, StrategyKind::Single],
            k: 10,
            mode: SaliencyMode::Guided,
            atlas_labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub strategies: Vec<StrategyKind>,
    pub train: StrategyConfig,
    pub noise_grid: Vec<NoiseSpec>,
    pub tau_grid: Vec<usize>,
    pub k: usize,
    pub seeds: Vec<u64>,
    /// δ of the nominal Gaussian budget.
    pub delta: f64,
    /// Sensitivity `s_h` of the nominal budgets.
    pub sensitivity: f64,
    /// Bins of the gate-value histogram.
    pub gate_bins: usize,
    /// Write per-step telemetry for federated strategies.
    pub telemetry: bool,
    pub interpret: InterpretConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let noise_grid = [0.001, 0.01, 0.1, 1.0]
            .into_iter()
            .flat_map(|a| [NoiseSpec::gaussian(a), NoiseSpec::laplace(a)])
            .collect();
        Self {
            out_dir: PathBuf::from("results"),
            data: DataConfig::default(),
            strategies: vec![
                StrategyKind::Single,
                StrategyKind::Mix,
                StrategyKind::Ensemble,
                StrategyKind::Fed,
                StrategyKind::FedMoE,
                StrategyKind::FedAlign,
            ],
            train: StrategyConfig::default(),
            noise_grid,
            tau_grid: vec![5, 10, 20, 30],
            k: 5,
            seeds: (0..10).collect(),
            delta: 1e-5,
            sensitivity: 1.0,
            gate_bins: 10,
            telemetry: true,
            interpret: InterpretConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the line, column and offending key.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.strategies.is_empty() {
            return bad("`strategies` must not be empty");
        }
        if self.seeds.is_empty() {
            return bad("`seeds` must not be empty");
        }
        if self.k < 2 {
            return bad("`k` must be at least 2");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.sensitivity > 0.0) {
            return bad("`delta` must lie in (0, 1) and `sensitivity` must be positive");
        }
        if self.gate_bins == 0 {
            return bad("`gate_bins` must be positive");
        }
        if self.data.source == DataKind::Csv && (self.data.roi_dir.is_none() || self.data.phenotype.is_none()) {
            return bad("csv data source needs `data.roi_dir` and `data.phenotype`");
        }
        for n in &self.noise_grid {
            n.validate()?;
        }
        self.train.fed.validate()?;
        Ok(())
    }

    pub fn require_tau_grid(&self) -> Result<()> {
        if self.tau_grid.is_empty() || self.tau_grid.contains(&0) {
            return Err(Error::Config("`tau_grid` must be non-empty with positive entries".into()));
        }
        Ok(())
    }

    pub fn require_noise_grid(&self) -> Result<()> {
        if self.noise_grid.is_empty() {
            return Err(Error::Config("`noise_grid` must not be empty".into()));
        }
        Ok(())
    }
}
