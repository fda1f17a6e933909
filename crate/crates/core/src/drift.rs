//! Weekly aggregation of residuals and Shewhart charting with one
//! supplementary run rule.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use chrono::{DateTime, Datelike, NaiveDate, Utc, Weekday};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modes::ModeLabel;

/// Minimum baseline length, in weeks.
pub const MIN_BASELINE_WEEKS: usize = 8;
/// Run length for the same-side rule.
pub const RUN_LENGTH: usize = 8;
/// Weeks with fewer points than this fraction of the median training week are
/// left out of the baseline and not evaluated.
pub const DEFAULT_MIN_WEEK_FRACTION: f64 = 0.5;

pub const DRIFT_CSV_UNITS: &str =
    "# units: mean_residual=rpm (generator, actual - predicted), count=records, center=rpm, ucl=rpm, lcl=rpm";
pub const DRIFT_CSV_HEADER: [&str; 8] = [
    "iso_year",
    "iso_week",
    "mean_residual",
    "count",
    "center",
    "ucl",
    "lcl",
    "flag_rule",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DriftError {
    #[error("{series}: {weeks} usable baseline weeks, need at least {MIN_BASELINE_WEEKS}")]
    InsufficientBaseline { series: String, weeks: usize },
    #[error("{0}: baseline weekly means have zero spread")]
    DegenerateBaseline(String),
    #[error("baseline mixes series {0} and {1}")]
    MixedSeries(String, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// One series per turbine across all retained modes.
    #[default]
    Pooled,
    /// One series per (turbine, mode).
    PerMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPoint {
    pub timestamp: DateTime<Utc>,
    pub turbine_id: String,
    pub mode: ModeLabel,
    /// Generator rpm, actual minus predicted.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyResidual {
    pub turbine_id: String,
    /// `None` for pooled series.
    pub mode: Option<ModeLabel>,
    pub iso_year: i32,
    pub iso_week: u32,
    pub mean_residual: f64,
    pub count: usize,
}

impl WeeklyResidual {
    pub fn series_name(&self) -> String {
        series_name(&self.turbine_id, self.mode)
    }

    fn monday(&self) -> Option<NaiveDate> {
        NaiveDate::from_isoywd_opt(self.iso_year, self.iso_week, Weekday::Mon)
    }
}

fn series_name(turbine: &str, mode: Option<ModeLabel>) -> String {
    match mode {
        Some(m) => format!("{turbine}/{m}"),
        None => turbine.to_string(),
    }
}

/// Groups residuals by turbine (and mode, when not pooled) and ISO-8601 week.
/// Output is ordered by series, then chronologically; empty weeks are absent.
pub fn weekly_series(residuals: &[ResidualPoint], pooling: Pooling) -> Vec<WeeklyResidual> {
    let mut groups: BTreeMap<(&str, Option<ModeLabel>, i32, u32), (f64, usize)> = BTreeMap::new();
    for p in residuals {
        let week = p.timestamp.iso_week();
        let mode = match pooling {
            Pooling::Pooled => None,
            Pooling::PerMode => Some(p.mode),
        };
        let slot = groups
            .entry((p.turbine_id.as_str(), mode, week.year(), week.week()))
            .or_insert((0.0, 0));
        slot.0 += p.residual;
        slot.1 += 1;
    }
    groups
        .into_iter()
        .map(|((turbine, mode, iso_year, iso_week), (sum, count))| WeeklyResidual {
            turbine_id: turbine.to_string(),
            mode,
            iso_year,
            iso_week,
            mean_residual: sum / count as f64,
            count,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlChart {
    pub turbine_id: String,
    pub mode: Option<ModeLabel>,
    pub center: f64,
    pub sigma: f64,
    pub ucl: f64,
    pub lcl: f64,
    /// Weeks with fewer points are not evaluated.
    pub min_count: usize,
    pub baseline_weeks: usize,
}

pub fn build_chart(training_weeks: &[WeeklyResidual]) -> Result<ControlChart, DriftError> {
    build_chart_with(training_weeks, DEFAULT_MIN_WEEK_FRACTION)
}

/// Center and sigma (n-1) of the training weekly means, limits at ±3σ.
pub fn build_chart_with(training_weeks: &[WeeklyResidual], min_week_fraction: f64) -> Result<ControlChart, DriftError> {
    let Some(first) = training_weeks.first() else {
        return Err(DriftError::InsufficientBaseline {
            series: "(empty)".into(),
            weeks: 0,
        });
    };
    let name = first.series_name();
    if let Some(other) = training_weeks
        .iter()
        .find(|w| w.turbine_id != first.turbine_id || w.mode != first.mode)
    {
        return Err(DriftError::MixedSeries(name, other.series_name()));
    }
    if training_weeks.len() < MIN_BASELINE_WEEKS {
        return Err(DriftError::InsufficientBaseline {
            series: name,
            weeks: training_weeks.len(),
        });
    }
    let mut counts: Vec<usize> = training_weeks.iter().map(|w| w.count).collect();
    counts.sort_unstable();
    let mid = counts.len() / 2;
    let median = if counts.len().is_multiple_of(2) {
        (counts[mid - 1] + counts[mid]) as f64 / 2.0
    } else {
        counts[mid] as f64
    };
    let min_count = ((min_week_fraction * median).ceil() as usize).max(1);

    let baseline: Vec<f64> = training_weeks
        .iter()
        .filter(|w| w.count >= min_count)
        .map(|w| w.mean_residual)
        .collect();
    if baseline.len() < MIN_BASELINE_WEEKS {
        return Err(DriftError::InsufficientBaseline {
            series: name,
            weeks: baseline.len(),
        });
    }
    let n = baseline.len() as f64;
    let center = baseline.iter().sum::<f64>() / n;
    let sigma = (baseline.iter().map(|v| (v - center) * (v - center)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sigma > 0.0) {
        return Err(DriftError::DegenerateBaseline(name));
    }
    Ok(ControlChart {
        turbine_id: first.turbine_id.clone(),
        mode: first.mode,
        center,
        sigma,
        ucl: center + 3.0 * sigma,
        lcl: center - 3.0 * sigma,
        min_count,
        baseline_weeks: baseline.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DriftRule {
    #[serde(rename = "beyond-3-sigma")]
    BeyondThreeSigma,
    #[serde(rename = "run-of-8-same-side")]
    RunOfEight,
}

impl DriftRule {
    pub fn as_str(self) -> &'static str {
        match self {
            DriftRule::BeyondThreeSigma => "beyond-3-sigma",
            DriftRule::RunOfEight => "run-of-8-same-side",
        }
    }
}

impl fmt::Display for DriftRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftFlag {
    pub turbine_id: String,
    pub mode: Option<ModeLabel>,
    pub iso_year: i32,
    pub iso_week: u32,
    pub rule: DriftRule,
    /// Weekly mean residual, rpm.
    pub value: f64,
}

/// Applies the 3σ rule and the run-of-8 rule to `weeks` (one series, chronological).
/// A missing or under-covered week resets the run counter.
pub fn detect_drift(chart: &ControlChart, weeks: &[WeeklyResidual]) -> Vec<DriftFlag> {
    let mut flags = Vec::new();
    let mut run_side = 0i8;
    let mut run_len = 0usize;
    let mut prev_monday: Option<NaiveDate> = None;
    for w in weeks {
        if w.count < chart.min_count {
            run_len = 0;
            prev_monday = None;
            continue;
        }
        let monday = w.monday();
        let adjacent = matches!((prev_monday, monday), (Some(p), Some(m)) if (m - p).num_days() == 7);
        prev_monday = monday;

        let flag = |rule| DriftFlag {
            turbine_id: w.turbine_id.clone(),
            mode: w.mode,
            iso_year: w.iso_year,
            iso_week: w.iso_week,
            rule,
            value: w.mean_residual,
        };
        if (w.mean_residual - chart.center).abs() > 3.0 * chart.sigma {
            flags.push(flag(DriftRule::BeyondThreeSigma));
        }
        let side = if w.mean_residual > chart.center {
            1
        } else if w.mean_residual < chart.center {
            -1
        } else {
            0
        };
        if side == 0 {
            run_len = 0;
        } else if adjacent && side == run_side && run_len > 0 {
            run_len += 1;
        } else {
            run_len = 1;
        }
        run_side = side;
        if run_len == RUN_LENGTH {
            flags.push(flag(DriftRule::RunOfEight));
        }
    }
    flags.sort_by_key(|f| (f.iso_year, f.iso_week, f.rule));
    flags
}

/// Writes one series with its chart limits; `flag_rule` lists every rule that
/// fired in a week, `;`-separated.
pub fn write_drift_csv<W: Write>(
    out: W,
    chart: &ControlChart,
    weeks: &[WeeklyResidual],
    flags: &[DriftFlag],
) -> Result<(), csv::Error> {
    let mut out = out;
    writeln!(out, "{DRIFT_CSV_UNITS}")?;
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(DRIFT_CSV_HEADER)?;
    for w in weeks {
        let rules: Vec<&str> = flags
            .iter()
            .filter(|f| f.iso_year == w.iso_year && f.iso_week == w.iso_week)
            .map(|f| f.rule.as_str())
            .collect();
        wtr.write_record([
            w.iso_year.to_string(),
            w.iso_week.to_string(),
            w.mean_residual.to_string(),
            w.count.to_string(),
            chart.center.to_string(),
            chart.ucl.to_string(),
            chart.lcl.to_string(),
            rules.join(";"),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn week(year: i32, wk: u32, mean: f64) -> WeeklyResidual {
        WeeklyResidual {
            turbine_id: "T01".into(),
            mode: None,
            iso_year: year,
            iso_week: wk,
            mean_residual: mean,
            count: 100,
        }
    }

    fn point(ts: DateTime<Utc>, mode: ModeLabel, residual: f64) -> ResidualPoint {
        ResidualPoint {
            timestamp: ts,
            turbine_id: "T01".into(),
            mode,
            residual,
        }
    }

    #[test]
    fn constant_week() {
        // 2017-01-02 is the Monday of ISO week 1.
        let start = Utc.with_ymd_and_hms(2017, 1, 2, 0, 0, 0).unwrap();
        let pts: Vec<_> = (0..7)
            .map(|d| point(start + Duration::days(d), ModeLabel::GridConnecting, 2.0))
            .collect();
        let s = weekly_series(&pts, Pooling::Pooled);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].iso_year, s[0].iso_week, s[0].count), (2017, 1, 7));
        assert_eq!(s[0].mean_residual, 2.0);
    }

    #[test]
    fn symmetric_week_and_iso_boundary() {
        // 2017-01-01 is a Sunday and belongs to ISO 2016-W52.
        let sunday = Utc.with_ymd_and_hms(2017, 1, 1, 12, 0, 0).unwrap();
        let pts = vec![
            point(sunday, ModeLabel::GridConnecting, 1.0),
            point(sunday, ModeLabel::SubRatedProduction, -1.0),
        ];
        let s = weekly_series(&pts, Pooling::Pooled);
        assert_eq!((s[0].iso_year, s[0].iso_week), (2016, 52));
        assert_eq!(s[0].mean_residual, 0.0);
        assert_eq!(s[0].count, 2);
        let per = weekly_series(&pts, Pooling::PerMode);
        assert_eq!(per.len(), 2);
        assert_eq!(per[0].mode, Some(ModeLabel::GridConnecting));
    }

    #[test]
    fn chart_requires_eight_weeks() {
        let weeks: Vec<_> = (1..=5).map(|w| week(2016, w, 0.1 * w as f64)).collect();
        assert!(matches!(
            build_chart(&weeks),
            Err(DriftError::InsufficientBaseline { weeks: 5, .. })
        ));
        let flat: Vec<_> = (1..=10).map(|w| week(2016, w, 0.5)).collect();
        assert!(matches!(build_chart(&flat), Err(DriftError::DegenerateBaseline(_))));
    }

    #[test]
    fn chart_from_near_constant_baseline() {
        let eps = 1e-3;
        let mut weeks: Vec<_> = (1..=10).map(|w| week(2016, w, 0.0)).collect();
        weeks[3].mean_residual = eps;
        weeks[7].mean_residual = -eps;
        let c = build_chart(&weeks).unwrap();
        assert_eq!(c.center, 0.0);
        assert!(c.sigma < eps);
        assert!(c.ucl > c.center && c.center > c.lcl);
    }

    #[test]
    fn under_covered_weeks_leave_baseline() {
        let mut weeks: Vec<_> = (1..=12).map(|w| week(2016, w, if w % 2 == 0 { 0.1 } else { -0.1 })).collect();
        weeks[0].count = 10;
        weeks[0].mean_residual = 50.0;
        let c = build_chart(&weeks).unwrap();
        assert_eq!(c.min_count, 50);
        assert_eq!(c.baseline_weeks, 11);
        assert!(detect_drift(&c, &weeks).is_empty());
    }

    fn chart(center: f64, sigma: f64) -> ControlChart {
        ControlChart {
            turbine_id: "T01".into(),
            mode: None,
            center,
            sigma,
            ucl: center + 3.0 * sigma,
            lcl: center - 3.0 * sigma,
            min_count: 1,
            baseline_weeks: 52,
        }
    }

    #[test]
    fn no_flags_at_center() {
        let weeks: Vec<_> = (1..=52).map(|w| week(2017, w, 0.25)).collect();
        assert!(detect_drift(&chart(0.25, 0.1), &weeks).is_empty());
    }

    #[test]
    fn single_excursion() {
        let mut weeks: Vec<_> = (1..=20).map(|w| week(2017, w, if w % 2 == 0 { 0.05 } else { -0.05 })).collect();
        weeks[9].mean_residual = 0.4;
        let flags = detect_drift(&chart(0.0, 0.1), &weeks);
        assert_eq!(flags.len(), 1);
        assert_eq!((flags[0].iso_week, flags[0].rule), (10, DriftRule::BeyondThreeSigma));
    }

    #[test]
    fn run_of_eight_and_gap_reset() {
        let weeks: Vec<_> = (1..=10).map(|w| week(2017, w, 0.01)).collect();
        let flags = detect_drift(&chart(0.0, 1.0), &weeks);
        assert_eq!(flags.len(), 1);
        assert_eq!((flags[0].iso_week, flags[0].rule), (8, DriftRule::RunOfEight));

        // Week 5 missing: two runs of four, nothing flagged.
        let gapped: Vec<_> = (1..=9).filter(|&w| w != 5).map(|w| week(2017, w, 0.01)).collect();
        assert!(detect_drift(&chart(0.0, 1.0), &gapped).is_empty());

        // Runs continue across the ISO year boundary (2016 has 52 weeks).
        let mut wrap: Vec<_> = (47..=52).map(|w| week(2016, w, -0.01)).collect();
        wrap.extend((1..=2).map(|w| week(2017, w, -0.01)));
        let f = detect_drift(&chart(0.0, 1.0), &wrap);
        assert_eq!(f.len(), 1);
        assert_eq!((f[0].iso_year, f[0].iso_week), (2017, 2));
    }

    #[test]
    fn ramp_crossing_is_flagged_on_time() {
        // Weekly means ramp linearly from 0 at week 30 to +4σ at week 43;
        // the true mean first exceeds 3σ at week 30 + ceil(3/4 * 13) = 40.
        let sigma = 0.1;
        let weeks: Vec<_> = (1..=52)
            .map(|w| {
                let drift = if w <= 30 { 0.0 } else { 4.0 * sigma * ((w - 30) as f64 / 13.0).min(1.0) };
                let wobble = if w % 2 == 0 { 0.3 * sigma } else { -0.3 * sigma };
                week(2017, w, drift + wobble)
            })
            .collect();
        let first = detect_drift(&chart(0.0, sigma), &weeks)
            .into_iter()
            .find(|f| f.rule == DriftRule::BeyondThreeSigma)
            .unwrap();
        assert!((first.iso_week as i64 - 40).abs() <= 2, "flagged at {}", first.iso_week);
    }

    #[test]
    fn csv_layout() {
        let weeks = vec![week(2017, 1, 0.0), week(2017, 2, 0.5)];
        let c = chart(0.0, 0.1);
        let flags = detect_drift(&c, &weeks);
        let mut buf = Vec::new();
        write_drift_csv(&mut buf, &c, &weeks, &flags).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# units:"));
        assert_eq!(lines[1], "iso_year,iso_week,mean_residual,count,center,ucl,lcl,flag_rule");
        assert!(lines[2].ends_with(','));
        assert!(lines[3].ends_with(",beyond-3-sigma"));
    }
}
