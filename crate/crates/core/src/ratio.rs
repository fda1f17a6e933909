//! Per-mode least-squares lines of generator speed against rotor speed, the
//! R² retention gate, and residual scoring.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modes::ModeLabel;

/// Below this many points a per-mode fit is not attempted.
pub const MIN_POINTS: usize = 30;

pub const DEFAULT_R2_THRESHOLD: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RatioError {
    #[error("generator speed {0} rpm gives no defined speed ratio")]
    UndefinedRatio(f64),
    #[error("{mode}: {n} points, need at least {MIN_POINTS}")]
    InsufficientData { mode: ModeLabel, n: usize },
    #[error("{0}: rotor speed has zero variance")]
    DegenerateMode(ModeLabel),
    #[error("{0}: non-finite input")]
    NonFinite(ModeLabel),
    #[error("R² threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
}

/// Driving (rotor) speed over driven (generator) speed.
pub fn speed_ratio(rotor_rpm: f64, gen_rpm: f64) -> Result<f64, RatioError> {
    if !(gen_rpm > 0.0) {
        return Err(RatioError::UndefinedRatio(gen_rpm));
    }
    Ok(rotor_rpm / gen_rpm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    #[serde(rename = "turbine")]
    pub turbine_id: String,
    pub mode: ModeLabel,
    /// Generator rpm per rotor rpm.
    pub slope: f64,
    /// Generator rpm.
    pub intercept: f64,
    #[serde(rename = "r2")]
    pub r_squared: f64,
    pub n: usize,
    pub train_period: i32,
}

impl RatioModel {
    pub fn predict(&self, rotor_rpm: f64) -> f64 {
        self.slope * rotor_rpm + self.intercept
    }
}

/// Ordinary least squares `gen = slope * rotor + intercept` over `(rotor, gen)` pairs.
pub fn fit_ratio_model(
    points: &[(f64, f64)],
    turbine_id: &str,
    mode: ModeLabel,
    train_period: i32,
) -> Result<RatioModel, RatioError> {
    let n = points.len();
    if n < MIN_POINTS {
        return Err(RatioError::InsufficientData { mode, n });
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(RatioError::NonFinite(mode));
    }
    let nf = n as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        let dy = y - mean_y;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(RatioError::DegenerateMode(mode));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = points
        .iter()
        .map(|&(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    // A constant generator speed carries no ratio information.
    let r_squared = if syy > 0.0 {
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(RatioModel {
        turbine_id: turbine_id.to_string(),
        mode,
        slope,
        intercept,
        r_squared,
        n,
        train_period,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub mode: ModeLabel,
    pub r_squared: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedModeSet {
    pub turbine_id: String,
    pub threshold: f64,
    pub retained: Vec<RatioModel>,
    pub rejected: Vec<Rejection>,
}

impl RetainedModeSet {
    pub fn model_for(&self, mode: ModeLabel) -> Option<&RatioModel> {
        self.retained.iter().find(|m| m.mode == mode)
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }
}

/// Splits fitted models per turbine into retained (R² ≥ threshold) and rejected.
pub fn gate_modes(models: &[RatioModel], threshold: f64) -> Result<Vec<RetainedModeSet>, RatioError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RatioError::Threshold(threshold));
    }
    let mut per_turbine: BTreeMap<&str, RetainedModeSet> = BTreeMap::new();
    for m in models {
        let set = per_turbine
            .entry(m.turbine_id.as_str())
            .or_insert_with(|| RetainedModeSet {
                turbine_id: m.turbine_id.clone(),
                threshold,
                retained: Vec::new(),
                rejected: Vec::new(),
            });
        if m.r_squared >= threshold {
            set.retained.push(m.clone());
        } else {
            set.rejected.push(Rejection {
                mode: m.mode,
                r_squared: Some(m.r_squared),
                reason: format!("R² {:.6} below {threshold}", m.r_squared),
            });
        }
    }
    let sets: Vec<RetainedModeSet> = per_turbine.into_values().collect();
    for s in &sets {
        if s.retained.is_empty() {
            warn!("{}: every mode rejected by the R² gate, turbine excluded", s.turbine_id);
        }
    }
    Ok(sets)
}

/// Actual minus predicted generator rpm for each `(timestamp, rotor, gen)` point.
pub fn residuals(model: &RatioModel, points: &[(DateTime<Utc>, f64, f64)]) -> Vec<(DateTime<Utc>, f64)> {
    points
        .iter()
        .map(|&(ts, rotor, gen)| (ts, gen - model.predict(rotor)))
        .collect()
}
