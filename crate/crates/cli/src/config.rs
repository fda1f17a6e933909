use std::path::{Path, PathBuf};

use cbm_core::drift::{Pooling, DEFAULT_MIN_WEEK_FRACTION};
use cbm_core::ingest::ColumnProfile;
use cbm_core::mixture::{EmConfig, SelectionRule};
use cbm_core::pipeline::{ClusterSettings, MonitorSettings};
use cbm_core::ratio::DEFAULT_R2_THRESHOLD;
use cbm_core::synth::{DriftSpec, ModeParams, SynthConfig};
use serde::{Deserialize, Serialize};

/// Everything a run needs. Loaded from TOML; command-line flags override keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed for clustering and simulation.
    pub seed: u64,
    pub output: PathBuf,
    /// Worker threads; all outputs are identical for any value.
    pub jobs: Option<usize>,
    pub data: DataConfig,
    pub cluster: ClusterConfig,
    pub monitor: MonitorConfig,
    pub em: EmConfig,
    pub simulate: SimulateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output: PathBuf::from("out"),
            jobs: None,
            data: DataConfig::default(),
            cluster: ClusterConfig::default(),
            monitor: MonitorConfig::default(),
            em: EmConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub inputs: Vec<PathBuf>,
    pub profile: ProfileSetting,
    pub train_year: i32,
    pub validate_year: i32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            inputs: Vec::new(),
            profile: ProfileSetting::Named(ProfileName::Auto),
            train_year: 2016,
            validate_year: 2017,
        }
    }
}

/// `"auto"`, `"edp"`, `"canonical"`, or a table naming each column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSetting {
    Named(ProfileName),
    Custom(ColumnProfile),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    /// Canonical when the header has every canonical column, EDP otherwise.
    Auto,
    Edp,
    Canonical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub fixed_k: usize,
    pub selection: SelectionRule,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        let d = ClusterSettings::default();
        Self {
            k_min: d.k_min,
            k_max: d.k_max,
            fixed_k: d.fixed_k,
            selection: d.selection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorConfig {
    pub r2_threshold: f64,
    pub pooling: Pooling,
    /// Weeks with fewer points than this fraction of the median training week are skipped.
    pub min_week_fraction: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            r2_threshold: DEFAULT_R2_THRESHOLD,
            pooling: Pooling::Pooled,
            min_week_fraction: DEFAULT_MIN_WEEK_FRACTION,
        }
    }
}

/// Generator settings; the seed comes from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub turbines: Vec<String>,
    pub years: Vec<i32>,
    pub gear_slope: f64,
    pub occupancy: [f64; 6],
    pub modes: Vec<ModeParams>,
    pub noise_sigma: f64,
    pub drift: Vec<DriftSpec>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            turbines: d.turbines,
            years: d.years,
            gear_slope: d.gear_slope,
            occupancy: d.occupancy,
            modes: d.modes,
            noise_sigma: d.noise_sigma,
            drift: d.drift,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.data.train_year == self.data.validate_year {
            return bad(format!("train and validate year are both {}", self.data.train_year));
        }
        let c = &self.cluster;
        if c.k_min < 1 || c.k_max > 25 || c.k_min > c.k_max {
            return bad(format!("k range {}..{} must lie within 1..25", c.k_min, c.k_max));
        }
        if c.fixed_k < 1 || c.fixed_k > 25 {
            return bad(format!("fixed_k {} must lie within 1..25", c.fixed_k));
        }
        if c.selection == SelectionRule::FixedK && !(c.k_min..=c.k_max).contains(&c.fixed_k) {
            return bad(format!("fixed_k {} outside k range {}..{}", c.fixed_k, c.k_min, c.k_max));
        }
        let m = &self.monitor;
        if !(m.r2_threshold > 0.0 && m.r2_threshold < 1.0) {
            return bad(format!("r2_threshold {} must lie strictly between 0 and 1", m.r2_threshold));
        }
        if !(m.min_week_fraction >= 0.0 && m.min_week_fraction <= 1.0) {
            return bad(format!("min_week_fraction {} must lie within [0, 1]", m.min_week_fraction));
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        let e = &self.em;
        if e.max_iter == 0 || e.n_restarts == 0 || !(e.rel_tol > 0.0) || !(e.reg_scale >= 0.0) || !(e.reg_floor > 0.0) {
            return bad("em settings need max_iter, n_restarts >= 1 and positive tolerances".into());
        }
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        let s = &self.simulate;
        SynthConfig {
            turbines: s.turbines.clone(),
            years: s.years.clone(),
            seed: self.seed,
            gear_slope: s.gear_slope,
            occupancy: s.occupancy,
            modes: s.modes.clone(),
            noise_sigma: s.noise_sigma,
            drift: s.drift.clone(),
        }
    }

    pub fn cluster_settings(&self) -> ClusterSettings {
        ClusterSettings {
            k_min: self.cluster.k_min,
            k_max: self.cluster.k_max,
            selection: self.cluster.selection,
            fixed_k: self.cluster.fixed_k,
            seed: self.seed,
            em: self.em,
        }
    }

    pub fn monitor_settings(&self) -> MonitorSettings {
        MonitorSettings {
            cluster: self.cluster_settings(),
            r2_threshold: self.monitor.r2_threshold,
            pooling: self.monitor.pooling,
            min_week_fraction: self.monitor.min_week_fraction,
        }
    }
}
