//! Full-covariance Gaussian mixtures over the four standardized operating
//! features (power, wind speed, rotor speed, pitch angle).
//!
//! Fitting is EM from k-means++ seeds with several restarts; models carry
//! their AIC/BIC so a sweep over `k` can pick a component count.

mod em;
mod kmeans;
pub mod linalg;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ScadaRecord;
use linalg::{cholesky, log_det, lower_inverse, whitened_sq, Mat4, Vec4, DIM};

pub use em::{em_fit, sweep_k, EmConfig, ModelSweep, SelectionRule, SweepEntry, SweepOutcome};

/// Feature order used everywhere in standardized space.
pub const FEATURE_NAMES: [&str; DIM] = ["power", "wind_speed", "rotor_rpm", "pitch_angle"];

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("need at least 2 records to standardize, got {0}")]
    TooFewRecords(usize),
    #[error("zero-variance feature: {0}")]
    ZeroVariance(&'static str),
    #[error("non-finite feature value in row {0}")]
    NonFinite(usize),
    #[error("component count must be at least 1")]
    InvalidK,
    #[error("{n} samples is too few for k={k} (need {need})")]
    TooFewSamples { n: usize, k: usize, need: usize },
    #[error("k={k}: component collapse repeated {reseeds} times (restart {restart})")]
    Collapse { k: usize, restart: usize, reseeds: usize },
    #[error("k={k}: every restart failed")]
    AllRestartsFailed { k: usize },
    #[error("k range {lo}..={hi} outside 1..=25")]
    KRange { lo: usize, hi: usize },
    #[error("no component count could be fitted")]
    EmptySweep,
    #[error("fixed k={0} is not among the fitted component counts")]
    FixedKMissing(usize),
    #[error("invalid model document: {0}")]
    InvalidModel(String),
}

/// Raw (unscaled) features of a record in [`FEATURE_NAMES`] order.
pub fn raw_features(r: &ScadaRecord) -> Vec4 {
    [r.power_avg, r.wind_speed_avg, r.rotor_rpm_avg, r.pitch_angle_avg]
}

/// Per-feature z-score parameters (sample standard deviation, n-1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec4,
    pub std: Vec4,
}

impl Standardization {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; DIM],
            std: [1.0; DIM],
        }
    }

    /// Estimates parameters from raw feature rows. Column sums run over
    /// sorted values so the result does not depend on row order.
    pub fn estimate(rows: &[Vec4]) -> Result<Self, MixtureError> {
        if rows.len() < 2 {
            return Err(MixtureError::TooFewRecords(rows.len()));
        }
        if let Some(i) = rows.iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(MixtureError::NonFinite(i));
        }
        let n = rows.len() as f64;
        let mut out = Self::identity();
        let mut col: Vec<f64> = Vec::with_capacity(rows.len());
        for d in 0..DIM {
            col.clear();
            col.extend(rows.iter().map(|r| r[d]));
            col.sort_by(f64::total_cmp);
            let mean = col.iter().sum::<f64>() / n;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let std = (ss / (n - 1.0)).sqrt();
            if !(std > 0.0) || col[0] == col[col.len() - 1] {
                return Err(MixtureError::ZeroVariance(FEATURE_NAMES[d]));
            }
            out.mean[d] = mean;
            out.std[d] = std;
        }
        Ok(out)
    }

    pub fn apply(&self, raw: &Vec4) -> Vec4 {
        std::array::from_fn(|d| (raw[d] - self.mean[d]) / self.std[d])
    }

    pub fn invert(&self, z: &Vec4) -> Vec4 {
        std::array::from_fn(|d| z[d] * self.std[d] + self.mean[d])
    }
}

/// Standardized feature rows together with the parameters that produced them.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub rows: Vec<Vec4>,
    pub standardization: Standardization,
}

impl FeatureSet {
    /// Wraps rows that are already in model space.
    pub fn prestandardized(rows: Vec<Vec4>) -> Self {
        Self {
            rows,
            standardization: Standardization::identity(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn standardize(records: &[ScadaRecord]) -> Result<FeatureSet, MixtureError> {
    let raw: Vec<Vec4> = records.iter().map(raw_features).collect();
    standardize_rows(&raw)
}

pub fn standardize_rows(raw: &[Vec4]) -> Result<FeatureSet, MixtureError> {
    let standardization = Standardization::estimate(raw)?;
    Ok(FeatureSet {
        rows: raw.iter().map(|r| standardization.apply(r)).collect(),
        standardization,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: Vec4,
    pub covariance: Mat4,
}

/// Free parameters of a k-component full-covariance mixture in 4-D:
/// k-1 weights, 4k means, 10k covariance entries.
pub fn parameter_count(k: usize) -> usize {
    (k - 1) + DIM * k + DIM * (DIM + 1) / 2 * k
}

pub fn aic(log_likelihood: f64, k: usize) -> f64 {
    2.0 * parameter_count(k) as f64 - 2.0 * log_likelihood
}

pub fn bic(log_likelihood: f64, k: usize, n: usize) -> f64 {
    parameter_count(k) as f64 * (n as f64).ln() - 2.0 * log_likelihood
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelDoc", try_from = "ModelDoc")]
pub struct MixtureModel {
    pub k: usize,
    pub components: Vec<GaussianComponent>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub bic: f64,
    pub n: usize,
    pub standardization: Standardization,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    /// Which restart produced this model.
    pub restart: usize,
    /// Log-likelihood after every E-step of the winning restart.
    pub ll_trace: Vec<f64>,
    /// Iterations at which a collapsed component was re-seeded.
    pub reseed_iterations: Vec<usize>,
}

/// Serialized form: flat arrays, covariances row-major.
#[derive(Serialize, Deserialize)]
struct ModelDoc {
    k: usize,
    weights: Vec<f64>,
    means: Vec<Vec4>,
    covariances: Vec<[f64; DIM * DIM]>,
    standardization: Standardization,
    seed: u64,
    n: usize,
    log_likelihood: f64,
    aic: f64,
    bic: f64,
    iterations: usize,
    converged: bool,
    restart: usize,
}

impl From<MixtureModel> for ModelDoc {
    fn from(m: MixtureModel) -> Self {
        Self {
            k: m.k,
            weights: m.components.iter().map(|c| c.weight).collect(),
            means: m.components.iter().map(|c| c.mean).collect(),
            covariances: m.components.iter().map(|c| linalg::flatten(&c.covariance)).collect(),
            standardization: m.standardization,
            seed: m.seed,
            n: m.n,
            log_likelihood: m.log_likelihood,
            aic: m.aic,
            bic: m.bic,
            iterations: m.iterations,
            converged: m.converged,
            restart: m.restart,
        }
    }
}

impl TryFrom<ModelDoc> for MixtureModel {
    type Error = MixtureError;

    fn try_from(doc: ModelDoc) -> Result<Self, Self::Error> {
        let bad = |msg: String| Err(MixtureError::InvalidModel(msg));
        if doc.k == 0 || doc.weights.len() != doc.k || doc.means.len() != doc.k || doc.covariances.len() != doc.k {
            return bad(format!("array lengths do not match k={}", doc.k));
        }
        let total: f64 = doc.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || doc.weights.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return bad(format!("weights must lie in (0,1] and sum to 1, got sum {total}"));
        }
        let mut components = Vec::with_capacity(doc.k);
        for ((w, mean), cov) in doc.weights.iter().zip(&doc.means).zip(&doc.covariances) {
            let covariance = linalg::unflatten(cov);
            for i in 0..DIM {
                for j in 0..i {
                    if covariance[i][j] != covariance[j][i] {
                        return bad("covariance is not symmetric".into());
                    }
                }
            }
            if cholesky(&covariance).is_none() {
                return bad("covariance is not positive definite".into());
            }
            components.push(GaussianComponent {
                weight: *w,
                mean: *mean,
                covariance,
            });
        }
        Ok(MixtureModel {
            k: doc.k,
            components,
            log_likelihood: doc.log_likelihood,
            aic: doc.aic,
            bic: doc.bic,
            n: doc.n,
            standardization: doc.standardization,
            seed: doc.seed,
            iterations: doc.iterations,
            converged: doc.converged,
            restart: doc.restart,
            ll_trace: Vec::new(),
            reseed_iterations: Vec::new(),
        })
    }
}

impl MixtureModel {
    /// Component means mapped back to raw feature units.
    pub fn raw_means(&self) -> Vec<Vec4> {
        self.components
            .iter()
            .map(|c| self.standardization.invert(&c.mean))
            .collect()
    }

    pub fn total_log_likelihood(&self, features: &[Vec4]) -> f64 {
        let prepared = prepare(&self.components).expect("fitted covariances are positive definite");
        let mut scratch = vec![0.0; self.k];
        features
            .iter()
            .map(|x| log_responsibilities(x, &prepared, &mut scratch))
            .sum()
    }
}

/// Hard and soft assignment of one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub cluster: usize,
    pub responsibilities: Vec<f64>,
}

/// Posterior component probabilities for each standardized point; the hard
/// index is the arg-max, ties going to the lowest index.
pub fn assign(model: &MixtureModel, features: &[Vec4]) -> Vec<Assignment> {
    let prepared = prepare(&model.components).expect("fitted covariances are positive definite");
    features
        .iter()
        .map(|x| {
            let mut r = vec![0.0; model.k];
            log_responsibilities(x, &prepared, &mut r);
            Assignment {
                cluster: argmax_first(&r),
                responsibilities: r,
            }
        })
        .collect()
}

/// Only the hard labels, without allocating per-point vectors.
pub fn hard_assign(model: &MixtureModel, features: &[Vec4]) -> Vec<usize> {
    let prepared = prepare(&model.components).expect("fitted covariances are positive definite");
    let mut r = vec![0.0; model.k];
    features
        .iter()
        .map(|x| {
            log_responsibilities(x, &prepared, &mut r);
            argmax_first(&r)
        })
        .collect()
}

pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Component with its density terms precomputed.
pub(crate) struct Prepared {
    log_coef: f64,
    mean: Vec4,
    /// Inverse Cholesky factor of the covariance.
    whiten: Mat4,
}

pub(crate) fn prepare(components: &[GaussianComponent]) -> Option<Vec<Prepared>> {
    let half_log_2pi = 0.5 * DIM as f64 * (2.0 * PI).ln();
    components
        .iter()
        .map(|c| {
            let chol = cholesky(&c.covariance)?;
            Some(Prepared {
                log_coef: c.weight.ln() - half_log_2pi - 0.5 * log_det(&chol),
                mean: c.mean,
                whiten: lower_inverse(&chol),
            })
        })
        .collect()
}

/// Fills `out` with responsibilities and returns the point's log-likelihood.
#[inline]
pub(crate) fn log_responsibilities(x: &Vec4, comps: &[Prepared], out: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (slot, c) in out.iter_mut().zip(comps) {
        let d: Vec4 = std::array::from_fn(|i| x[i] - c.mean[i]);
        let lp = c.log_coef - 0.5 * whitened_sq(&c.whiten, &d);
        *slot = lp;
        if lp > max {
            max = lp;
        }
    }
    let mut sum = 0.0;
    for slot in out.iter_mut() {
        let t = *slot - max;
        // exp underflows to exactly zero below this; skip libm's slow path.
        *slot = if t < -746.0 { 0.0 } else { t.exp() };
        sum += *slot;
    }
    for slot in out.iter_mut() {
        *slot /= sum;
    }
    max + sum.ln()
}
