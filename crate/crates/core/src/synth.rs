//! Synthetic SCADA streams with known operating modes, gear slope, noise and
//! injected wear drift. Output uses the canonical ingestion dialect; the true
//! mode and drift of every record go to a sidecar.
//!
//! Default mode parameters are approximations built from reference mode
//! statistics (means, with standard deviations of range/6, features
//! independent). They are a test fixture, not measured ground truth.

use std::io::Write;

use chrono::{DateTime, Duration, NaiveDate, TimeZone, Utc, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{format_timestamp, ScadaRecord};
use crate::modes::ModeLabel;

pub const TRUTH_CSV_UNITS: &str = "# units: timestamp=UTC ISO-8601, true_mode=label, drift_value=rpm (generator)";

const TURBINE_SEED_STEP: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("write failed: {0}")]
    Write(#[from] csv::Error),
}

/// Per-mode feature distribution, features in (wind, rotor, pitch, power) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeParams {
    pub label: ModeLabel,
    pub mean: [f64; 4],
    pub sd: [f64; 4],
    /// Generator-speed noise as a multiple of the config's `noise_sigma`.
    pub noise_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftShape {
    Step,
    Ramp,
}

/// Additive generator-speed offset starting on the Monday of ISO week
/// `(year, week)`. `magnitude` is in units of `noise_sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub turbine: String,
    pub year: i32,
    pub week: u32,
    pub shape: DriftShape,
    pub magnitude: f64,
    /// Weeks a ramp takes to reach full magnitude.
    #[serde(default = "default_ramp_weeks")]
    pub ramp_weeks: u32,
}

fn default_ramp_weeks() -> u32 {
    8
}

impl DriftSpec {
    fn start(&self) -> Option<DateTime<Utc>> {
        NaiveDate::from_isoywd_opt(self.year, self.week, Weekday::Mon)
            .map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
    }

    fn value_at(&self, start: DateTime<Utc>, ts: DateTime<Utc>, sigma: f64) -> f64 {
        if ts < start {
            return 0.0;
        }
        let full = self.magnitude * sigma;
        match self.shape {
            DriftShape::Step => full,
            DriftShape::Ramp => {
                let span = Duration::weeks(self.ramp_weeks.max(1) as i64).num_seconds() as f64;
                let frac = ((ts - start).num_seconds() as f64 / span).min(1.0);
                full * frac
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub turbines: Vec<String>,
    /// Calendar years, each generated in full on a 10-minute grid.
    pub years: Vec<i32>,
    pub seed: u64,
    /// Generator rpm per rotor rpm.
    pub gear_slope: f64,
    /// Mode probabilities in [`ModeLabel::ALL`] order.
    pub occupancy: [f64; 6],
    pub modes: Vec<ModeParams>,
    /// Generator-speed noise (rpm) of the production modes.
    pub noise_sigma: f64,
    pub drift: Vec<DriftSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            turbines: ["T01", "T06", "T07", "T09", "T11"].map(String::from).to_vec(),
            years: vec![2016, 2017],
            seed: 42,
            gear_slope: 120.0,
            occupancy: default_occupancy(),
            modes: default_modes(),
            noise_sigma: 1.0,
            drift: Vec::new(),
        }
    }
}

/// Mode shares of a reference turbine-year, in [`ModeLabel::ALL`] order.
pub fn default_occupancy() -> [f64; 6] {
    let counts = [26767.0, 8323.0, 29548.0, 22993.0, 3094.0, 13958.0];
    let total: f64 = counts.iter().sum();
    counts.map(|c| c / total)
}

pub fn default_modes() -> Vec<ModeParams> {
    use ModeLabel::*;
    // (label, (min, max, mean) for wind, rotor, pitch, power; noise scale).
    // Non-production noise is sized to put each mode's R² near 0.95-0.98,
    // clearly under the usual 0.99 gate without swamping weekly means.
    let table: [(ModeLabel, [[f64; 3]; 4], f64); 6] = [
        (Idling, [[0.4, 4.6, 2.1], [0.0, 4.3, 0.8], [23.6, 24.3, 23.9], [-25.0, 0.9, -5.7]], 12.0),
        (Start, [[1.7, 5.0, 3.4], [0.0, 11.5, 7.1], [-0.4, 36.4, 11.0], [-27.5, 122.0, 11.3]], 30.0),
        (GridConnecting, [[3.1, 6.8, 5.1], [10.5, 13.3, 11.5], [-2.3, 0.8, -1.1], [-0.9, 579.2, 223.8]], 1.0),
        (SubRatedProduction, [[5.6, 10.6, 8.1], [11.8, 14.9, 13.9], [-2.5, -0.4, -1.9], [91.0, 1710.3, 923.0]], 1.0),
        (PitchManaged, [[0.6, 24.8, 8.6], [0.0, 14.9, 2.5], [-2.2, 90.6, 65.6], [-30.1, 1803.9, 84.7]], 40.0),
        (RatedProduction, [[9.2, 23.5, 12.6], [14.3, 14.9, 14.8], [-2.0, 22.8, 4.1], [1322.2, 2000.5, 1870.1]], 1.0),
    ];
    table
        .into_iter()
        .map(|(label, f, noise_scale)| ModeParams {
            label,
            mean: f.map(|v| v[2]),
            sd: f.map(|v| (v[1] - v[0]) / 6.0),
            noise_scale,
        })
        .collect()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.turbines.is_empty() || self.years.is_empty() {
            return bad("need at least one turbine and one year".into());
        }
        let mut ids = self.turbines.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != self.turbines.len() {
            return bad("duplicate turbine id".into());
        }
        if self.occupancy.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad(format!("occupancy {:?} has negative or non-finite entries", self.occupancy));
        }
        let total: f64 = self.occupancy.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("occupancy sums to {total}, not 1"));
        }
        for label in ModeLabel::ALL {
            let n = self.modes.iter().filter(|m| m.label == label).count();
            if n != 1 {
                return bad(format!("mode {label} defined {n} times"));
            }
        }
        for m in &self.modes {
            let finite = m.mean.iter().chain(&m.sd).all(|v| v.is_finite());
            if !finite || m.sd.iter().any(|s| *s < 0.0) || !(m.noise_scale >= 0.0) {
                return bad(format!("mode {} has invalid parameters", m.label));
            }
        }
        if !self.gear_slope.is_finite() || !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad("gear_slope and noise_sigma must be finite, noise_sigma >= 0".into());
        }
        for d in &self.drift {
            if !d.magnitude.is_finite() {
                return bad(format!("drift on {} has non-finite magnitude", d.turbine));
            }
            if d.start().is_none() {
                return bad(format!("drift week {}-W{} does not exist", d.year, d.week));
            }
            if !self.turbines.contains(&d.turbine) {
                return bad(format!("drift names unknown turbine {}", d.turbine));
            }
        }
        Ok(())
    }

    fn params(&self, label: ModeLabel) -> &ModeParams {
        self.modes.iter().find(|m| m.label == label).expect("validated")
    }

    pub fn turbine_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_add(TURBINE_SEED_STEP.wrapping_mul(index as u64 + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthRow {
    pub timestamp: DateTime<Utc>,
    pub true_mode: ModeLabel,
    pub drift_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTurbine {
    pub turbine_id: String,
    pub records: Vec<ScadaRecord>,
    pub truth: Vec<TruthRow>,
}

/// Generates every turbine; each has its own RNG stream so the result does not
/// depend on how turbines are scheduled.
pub fn generate(config: &SynthConfig) -> Result<Vec<SynthTurbine>, SynthError> {
    config.validate()?;
    Ok((0..config.turbines.len())
        .into_par_iter()
        .map(|i| generate_turbine(config, i))
        .collect())
}

fn generate_turbine(config: &SynthConfig, index: usize) -> SynthTurbine {
    let turbine_id = config.turbines[index].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.turbine_seed(index));
    let drifts: Vec<(&DriftSpec, DateTime<Utc>)> = config
        .drift
        .iter()
        .filter(|d| d.turbine == turbine_id)
        .map(|d| (d, d.start().expect("validated")))
        .collect();
    let cumulative: Vec<f64> = config
        .occupancy
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();

    let mut years = config.years.clone();
    years.sort_unstable();
    years.dedup();
    let mut records = Vec::new();
    let mut truth = Vec::new();
    for year in years {
        let mut ts = Utc.with_ymd_and_hms(year, 1, 1, 0, 0, 0).unwrap();
        let end = Utc.with_ymd_and_hms(year + 1, 1, 1, 0, 0, 0).unwrap();
        while ts < end {
            let u: f64 = rng.random();
            let slot = cumulative.iter().position(|&c| u < c).unwrap_or_else(|| {
                // u landed in floating-point slack above the last cumulative sum
                config.occupancy.iter().rposition(|&p| p > 0.0).expect("occupancy sums to 1")
            });
            let label = ModeLabel::ALL[slot];
            let p = config.params(label);
            let mut draw = |d: usize| {
                let z: f64 = StandardNormal.sample(&mut rng);
                p.mean[d] + p.sd[d] * z
            };
            let wind = draw(0).max(0.0);
            let rotor = draw(1).max(0.0);
            let pitch = draw(2);
            let power = draw(3);
            let z: f64 = StandardNormal.sample(&mut rng);
            let drift_value: f64 = drifts
                .iter()
                .map(|(d, start)| d.value_at(*start, ts, config.noise_sigma))
                .sum();
            let gen =
                (config.gear_slope * rotor + config.noise_sigma * p.noise_scale * z + drift_value).max(0.0);
            records.push(ScadaRecord {
                timestamp: ts,
                turbine_id: turbine_id.clone(),
                wind_speed_avg: wind,
                power_avg: power,
                rotor_rpm_avg: rotor,
                gen_rpm_avg: gen,
                pitch_angle_avg: pitch,
            });
            truth.push(TruthRow {
                timestamp: ts,
                true_mode: label,
                drift_value,
            });
            ts += Duration::minutes(10);
        }
    }
    SynthTurbine {
        turbine_id,
        records,
        truth,
    }
}

pub fn write_truth<W: Write>(out: W, truth: &[TruthRow]) -> Result<(), SynthError> {
    let mut out = out;
    writeln!(out, "{TRUTH_CSV_UNITS}").map_err(csv::Error::from)?;
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["timestamp", "true_mode", "drift_value"])?;
    for t in truth {
        wtr.write_record([
            format_timestamp(&t.timestamp),
            t.true_mode.as_str().to_string(),
            t.drift_value.to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(years: Vec<i32>) -> SynthConfig {
        SynthConfig {
            turbines: vec!["T01".into(), "T02".into()],
            years,
            ..Default::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        SynthConfig::default().validate().unwrap();
        let occ: f64 = default_occupancy().iter().sum();
        assert!((occ - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_occupancy() {
        let mut c = small(vec![2017]);
        c.occupancy = [0.5, 0.5, 0.5, 0.0, 0.0, 0.0];
        assert!(c.validate().is_err());
        c.occupancy = [1.5, -0.5, 0.0, 0.0, 0.0, 0.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_and_invariants() {
        let out = generate(&small(vec![2017])).unwrap();
        assert_eq!(out.len(), 2);
        for t in &out {
            assert_eq!(t.records.len(), 365 * 144);
            assert!(t.records.iter().all(|r| r.is_valid()));
            assert!(t.records.windows(2).all(|w| w[1].timestamp - w[0].timestamp == Duration::minutes(10)));
        }
        assert_ne!(out[0].records[0].gen_rpm_avg, out[1].records[0].gen_rpm_avg);
    }

    #[test]
    fn idling_only() {
        let mut c = small(vec![2017]);
        c.occupancy = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let out = generate(&c).unwrap();
        assert!(out[0].truth.iter().all(|t| t.true_mode == ModeLabel::Idling));
    }

    #[test]
    fn step_drift_starts_on_week_monday() {
        let mut c = small(vec![2017]);
        c.drift.push(DriftSpec {
            turbine: "T02".into(),
            year: 2017,
            week: 40,
            shape: DriftShape::Step,
            magnitude: 4.0,
            ramp_weeks: 8,
        });
        let out = generate(&c).unwrap();
        // ISO 2017-W40 starts Monday 2017-10-02.
        let start = Utc.with_ymd_and_hms(2017, 10, 2, 0, 0, 0).unwrap();
        assert!(out[0].truth.iter().all(|t| t.drift_value == 0.0));
        for t in &out[1].truth {
            let want = if t.timestamp >= start { 4.0 } else { 0.0 };
            assert_eq!(t.drift_value, want);
        }
    }

    #[test]
    fn ramp_reaches_full_magnitude() {
        let d = DriftSpec {
            turbine: "T01".into(),
            year: 2017,
            week: 10,
            shape: DriftShape::Ramp,
            magnitude: 2.0,
            ramp_weeks: 4,
        };
        let s = d.start().unwrap();
        assert_eq!(d.value_at(s, s - Duration::minutes(10), 0.5), 0.0);
        assert_eq!(d.value_at(s, s + Duration::weeks(2), 0.5), 0.5);
        assert_eq!(d.value_at(s, s + Duration::weeks(9), 0.5), 1.0);
    }

    #[test]
    fn deterministic() {
        let c = small(vec![2017]);
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
    }
}
