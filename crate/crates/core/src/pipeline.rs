//! Per-turbine orchestration of the clustering and monitoring stages, plus
//! the serializable summaries written by the command-line tool.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, Utc};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{
    build_chart_with, detect_drift, weekly_series, ControlChart, DriftError, DriftFlag, DriftRule, Pooling,
    ResidualPoint, WeeklyResidual, DEFAULT_MIN_WEEK_FRACTION, DRIFT_CSV_HEADER, DRIFT_CSV_UNITS,
};
use crate::ingest::{DataSplit, IngestError, ScadaRecord};
use crate::mixture::{
    hard_assign, raw_features, standardize, sweep_k, EmConfig, MixtureError, MixtureModel, ModelSweep,
    SelectionRule,
};
use crate::modes::{canonical_signatures, label_clusters, LabeledModel, ModeLabel};
use crate::ratio::{fit_ratio_model, gate_modes, RatioError, RatioModel, Rejection, RetainedModeSet};
use crate::report::{mode_stats, ModeStatsRow};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{turbine}: {source}")]
    Model { turbine: String, source: MixtureError },
    #[error(transparent)]
    Ratio(#[from] RatioError),
    #[error("no turbine could be monitored")]
    NothingMonitored,
}

/// Pipeline stage an error belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Modeling,
    Monitoring,
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Ingest(_) => Stage::Ingest,
            PipelineError::Model { .. } | PipelineError::Ratio(_) => Stage::Modeling,
            PipelineError::NothingMonitored => Stage::Monitoring,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSettings {
    pub k_min: usize,
    pub k_max: usize,
    pub selection: SelectionRule,
    pub fixed_k: usize,
    pub seed: u64,
    pub em: EmConfig,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self {
            k_min: 1,
            k_max: 20,
            selection: SelectionRule::FixedK,
            fixed_k: 6,
            seed: 42,
            em: EmConfig::default(),
        }
    }
}

impl ClusterSettings {
    /// Settings that fit only the model the selection rule would end on:
    /// the fixed k alone, or the full range for min-AIC.
    pub fn operational(&self) -> Self {
        match self.selection {
            SelectionRule::FixedK => Self {
                k_min: self.fixed_k,
                k_max: self.fixed_k,
                ..self.clone()
            },
            SelectionRule::MinAic => self.clone(),
        }
    }
}

/// Model file contents: the mixture plus one label per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub turbine_id: String,
    #[serde(flatten)]
    pub mixture: MixtureModel,
    pub cluster_labels: Vec<ModeLabel>,
    pub match_cost: f64,
}

impl ModelDocument {
    pub fn new(turbine_id: &str, labeled: &LabeledModel) -> Self {
        Self {
            turbine_id: turbine_id.to_string(),
            mixture: labeled.mixture.clone(),
            cluster_labels: labeled.mapping.clone(),
            match_cost: labeled.match_cost,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TurbineClusters {
    pub turbine_id: String,
    pub sweep: ModelSweep,
    pub labeled: LabeledModel,
    /// Cluster index of every training record.
    pub assignments: Vec<usize>,
    pub mode_stats: Vec<ModeStatsRow>,
}

/// Standardize, sweep k, label the chosen model and tabulate mode statistics.
pub fn cluster_turbine(
    turbine_id: &str,
    train: &[ScadaRecord],
    settings: &ClusterSettings,
) -> Result<TurbineClusters, PipelineError> {
    let model_err = |source| PipelineError::Model {
        turbine: turbine_id.to_string(),
        source,
    };
    let features = standardize(train).map_err(model_err)?;
    let outcome = sweep_k(
        &features,
        settings.k_min,
        settings.k_max,
        settings.selection,
        settings.fixed_k,
        settings.seed,
        &settings.em,
    )
    .map_err(model_err)?;
    let labeled = label_clusters(outcome.chosen(), &canonical_signatures());
    let assignments = hard_assign(&labeled.mixture, &features.rows);
    let stats = mode_stats(train, &assignments, &labeled.mapping);
    info!(
        "{turbine_id}: k={} chosen ({} records), min-AIC k={}",
        outcome.sweep.chosen_k,
        train.len(),
        outcome.sweep.min_aic_k
    );
    Ok(TurbineClusters {
        turbine_id: turbine_id.to_string(),
        sweep: outcome.sweep,
        labeled,
        assignments,
        mode_stats: stats,
    })
}

/// Labels records with the operating mode of their most probable component.
pub fn label_records(labeled: &LabeledModel, records: &[ScadaRecord]) -> Vec<ModeLabel> {
    let z = &labeled.mixture.standardization;
    let rows: Vec<_> = records.iter().map(|r| z.apply(&raw_features(r))).collect();
    hard_assign(&labeled.mixture, &rows)
        .into_iter()
        .map(|c| labeled.mapping[c])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorSettings {
    pub cluster: ClusterSettings,
    pub r2_threshold: f64,
    pub pooling: Pooling,
    pub min_week_fraction: f64,
}

impl Default for MonitorSettings {
    fn default() -> Self {
        Self {
            cluster: ClusterSettings::default(),
            r2_threshold: crate::ratio::DEFAULT_R2_THRESHOLD,
            pooling: Pooling::Pooled,
            min_week_fraction: DEFAULT_MIN_WEEK_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    Train,
    Validate,
}

impl Period {
    pub fn as_str(self) -> &'static str {
        match self {
            Period::Train => "train",
            Period::Validate => "validate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodFlag {
    pub period: Period,
    pub iso_year: i32,
    pub iso_week: u32,
    pub rule: DriftRule,
    /// Weekly mean residual, rpm.
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mode: Option<ModeLabel>,
}

/// One charted series: its limits and every week with the rules that fired.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitoredSeries {
    pub chart: ControlChart,
    pub rows: Vec<ChartRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartRow {
    pub period: Period,
    pub week: WeeklyResidual,
    pub rules: Vec<DriftRule>,
}

impl MonitoredSeries {
    pub fn flags(&self) -> Vec<PeriodFlag> {
        self.rows
            .iter()
            .flat_map(|row| {
                row.rules.iter().map(|&rule| PeriodFlag {
                    period: row.period,
                    iso_year: row.week.iso_year,
                    iso_week: row.week.iso_week,
                    rule,
                    value: row.week.mean_residual,
                    mode: row.week.mode,
                })
            })
            .collect()
    }

    /// Drift CSV: training weeks then validation weeks. A boundary ISO week
    /// split between the two years appears once per period.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut out = out;
        writeln!(out, "{DRIFT_CSV_UNITS}")?;
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(DRIFT_CSV_HEADER)?;
        let c = &self.chart;
        for row in &self.rows {
            let rules: Vec<&str> = row.rules.iter().map(|r| r.as_str()).collect();
            wtr.write_record([
                row.week.iso_year.to_string(),
                row.week.iso_week.to_string(),
                row.week.mean_residual.to_string(),
                row.week.count.to_string(),
                c.center.to_string(),
                c.ucl.to_string(),
                c.lcl.to_string(),
                rules.join(";"),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum TurbineStatus {
    Monitored,
    Excluded { reason: String },
}

#[derive(Debug, Clone)]
pub struct TurbineMonitor {
    pub turbine_id: String,
    pub clusters: TurbineClusters,
    pub fits: Vec<RatioModel>,
    pub gate: RetainedModeSet,
    pub series: Vec<MonitoredSeries>,
    pub status: TurbineStatus,
}

impl TurbineMonitor {
    pub fn flags(&self) -> Vec<PeriodFlag> {
        let mut all: Vec<PeriodFlag> = self.series.iter().flat_map(|s| s.flags()).collect();
        all.sort_by(|a, b| {
            (a.period, a.iso_year, a.iso_week, a.mode, a.rule).cmp(&(b.period, b.iso_year, b.iso_week, b.mode, b.rule))
        });
        all
    }
}

fn residual_points(
    records: &[ScadaRecord],
    labels: &[ModeLabel],
    gate: &RetainedModeSet,
) -> Vec<ResidualPoint> {
    records
        .iter()
        .zip(labels)
        .filter_map(|(r, &mode)| {
            let m = gate.model_for(mode)?;
            Some(ResidualPoint {
                timestamp: r.timestamp,
                turbine_id: r.turbine_id.clone(),
                mode,
                residual: r.gen_rpm_avg - m.predict(r.rotor_rpm_avg),
            })
        })
        .collect()
}

fn group_series(weeks: Vec<WeeklyResidual>) -> BTreeMap<Option<ModeLabel>, Vec<WeeklyResidual>> {
    let mut out: BTreeMap<Option<ModeLabel>, Vec<WeeklyResidual>> = BTreeMap::new();
    for w in weeks {
        out.entry(w.mode).or_default().push(w);
    }
    out
}

fn rows_for(period: Period, chart: &ControlChart, weeks: &[WeeklyResidual]) -> Vec<ChartRow> {
    let flags: Vec<DriftFlag> = detect_drift(chart, weeks);
    weeks
        .iter()
        .map(|w| ChartRow {
            period,
            week: w.clone(),
            rules: flags
                .iter()
                .filter(|f| f.iso_year == w.iso_year && f.iso_week == w.iso_week)
                .map(|f| f.rule)
                .collect(),
        })
        .collect()
}

/// Full monitoring chain for one turbine.
pub fn monitor_turbine(
    turbine_id: &str,
    split: &DataSplit,
    settings: &MonitorSettings,
) -> Result<TurbineMonitor, PipelineError> {
    let clusters = cluster_turbine(turbine_id, &split.train, &settings.cluster.operational())?;
    let labeled = &clusters.labeled;
    let train_labels: Vec<ModeLabel> = clusters.assignments.iter().map(|&c| labeled.mapping[c]).collect();
    let validate_labels = label_records(labeled, &split.validate);

    let mut fits = Vec::new();
    let mut unfit = Vec::new();
    for mode in labeled.labels() {
        let points: Vec<(f64, f64)> = split
            .train
            .iter()
            .zip(&train_labels)
            .filter(|(_, &l)| l == mode)
            .map(|(r, _)| (r.rotor_rpm_avg, r.gen_rpm_avg))
            .collect();
        match fit_ratio_model(&points, turbine_id, mode, split.train_year) {
            Ok(m) => fits.push(m),
            Err(e) => unfit.push(Rejection {
                mode,
                r_squared: None,
                reason: e.to_string(),
            }),
        }
    }
    let mut gate = gate_modes(&fits, settings.r2_threshold)?
        .into_iter()
        .next()
        .unwrap_or_else(|| RetainedModeSet {
            turbine_id: turbine_id.to_string(),
            threshold: settings.r2_threshold,
            retained: Vec::new(),
            rejected: Vec::new(),
        });
    gate.rejected.extend(unfit);
    gate.rejected.sort_by_key(|r| r.mode);

    let mut out = TurbineMonitor {
        turbine_id: turbine_id.to_string(),
        clusters: clusters.clone(),
        fits,
        gate,
        series: Vec::new(),
        status: TurbineStatus::Monitored,
    };
    if out.gate.is_empty() {
        out.status = TurbineStatus::Excluded {
            reason: "every operating mode rejected by the R² gate".into(),
        };
        return Ok(out);
    }

    let train_weeks = weekly_series(
        &residual_points(&split.train, &train_labels, &out.gate),
        settings.pooling,
    );
    let validate_weeks = weekly_series(
        &residual_points(&split.validate, &validate_labels, &out.gate),
        settings.pooling,
    );
    let mut validate_groups = group_series(validate_weeks);
    let mut chart_errors: Vec<DriftError> = Vec::new();
    for (mode, train) in group_series(train_weeks) {
        let chart = match build_chart_with(&train, settings.min_week_fraction) {
            Ok(c) => c,
            Err(e) => {
                warn!("{turbine_id}: {e}");
                chart_errors.push(e);
                continue;
            }
        };
        let validate = validate_groups.remove(&mode).unwrap_or_default();
        let mut rows = rows_for(Period::Train, &chart, &train);
        rows.extend(rows_for(Period::Validate, &chart, &validate));
        out.series.push(MonitoredSeries { chart, rows });
    }
    if out.series.is_empty() {
        let reason = chart_errors
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        out.status = TurbineStatus::Excluded {
            reason: if reason.is_empty() {
                "no residual series to chart".into()
            } else {
                reason
            },
        };
    }
    Ok(out)
}

/// Runs `f` on every turbine of the split in parallel; results keep turbine order.
pub fn for_each_turbine<T, F>(split: &DataSplit, f: F) -> Result<Vec<T>, PipelineError>
where
    T: Send,
    F: Fn(&str, &DataSplit) -> Result<T, PipelineError> + Sync,
{
    let per: Vec<(String, DataSplit)> = split.by_turbine().into_iter().collect();
    per.par_iter().map(|(id, s)| f(id, s)).collect()
}

pub fn monitor_all(split: &DataSplit, settings: &MonitorSettings) -> Result<Vec<TurbineMonitor>, PipelineError> {
    let out = for_each_turbine(split, |id, s| monitor_turbine(id, s, settings))?;
    if out.iter().all(|t| t.status != TurbineStatus::Monitored) {
        return Err(PipelineError::NothingMonitored);
    }
    Ok(out)
}

pub fn cluster_all(split: &DataSplit, settings: &ClusterSettings) -> Result<Vec<TurbineClusters>, PipelineError> {
    for_each_turbine(split, |id, s| cluster_turbine(id, &s.train, settings))
}

// ---- serialized summaries ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurbineClusterSummary {
    pub turbine_id: String,
    pub sweep: ModelSweep,
    pub cluster_labels: Vec<ModeLabel>,
    pub match_cost: f64,
    pub mode_stats: Vec<ModeStatsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub seed: u64,
    pub train_year: i32,
    pub turbines: Vec<TurbineClusterSummary>,
}

impl ClusterSummary {
    pub fn new(seed: u64, train_year: i32, clusters: &[TurbineClusters]) -> Self {
        Self {
            seed,
            train_year,
            turbines: clusters
                .iter()
                .map(|c| TurbineClusterSummary {
                    turbine_id: c.turbine_id.clone(),
                    sweep: c.sweep.clone(),
                    cluster_labels: c.labeled.mapping.clone(),
                    match_cost: c.labeled.match_cost,
                    mode_stats: c.mode_stats.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEntry {
    #[serde(flatten)]
    pub model: RatioModel,
    pub retained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurbineMonitorSummary {
    pub turbine_id: String,
    #[serde(flatten)]
    pub status: TurbineStatus,
    pub ratio_models: Vec<RatioEntry>,
    pub rejected: Vec<Rejection>,
    pub series: Vec<ControlChart>,
    pub flags: Vec<PeriodFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSummary {
    pub train_year: i32,
    pub validate_year: i32,
    pub pooling: Pooling,
    pub r2_threshold: f64,
    pub seed: u64,
    pub turbines: Vec<TurbineMonitorSummary>,
}

impl MonitorSummary {
    pub fn new(split: &DataSplit, settings: &MonitorSettings, monitors: &[TurbineMonitor]) -> Self {
        Self {
            train_year: split.train_year,
            validate_year: split.validate_year,
            pooling: settings.pooling,
            r2_threshold: settings.r2_threshold,
            seed: settings.cluster.seed,
            turbines: monitors
                .iter()
                .map(|t| TurbineMonitorSummary {
                    turbine_id: t.turbine_id.clone(),
                    status: t.status.clone(),
                    ratio_models: t
                        .fits
                        .iter()
                        .map(|m| RatioEntry {
                            model: m.clone(),
                            retained: t.gate.model_for(m.mode).is_some(),
                        })
                        .collect(),
                    rejected: t.gate.rejected.clone(),
                    series: t.series.iter().map(|s| s.chart.clone()).collect(),
                    flags: t.flags(),
                })
                .collect(),
        }
    }

    /// Compact `turbine -> {status, flags}` view.
    pub fn flag_summary(&self) -> BTreeMap<String, FlagSummary> {
        self.turbines
            .iter()
            .map(|t| {
                (
                    t.turbine_id.clone(),
                    FlagSummary {
                        status: t.status.clone(),
                        retained_modes: t.ratio_models.iter().filter(|r| r.retained).map(|r| r.model.mode).collect(),
                        flags: t.flags.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn ratio_models(&self) -> Vec<RatioEntry> {
        self.turbines.iter().flat_map(|t| t.ratio_models.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagSummary {
    #[serde(flatten)]
    pub status: TurbineStatus,
    pub retained_modes: Vec<ModeLabel>,
    pub flags: Vec<PeriodFlag>,
}

/// Sweep table with a unit line and the selection outcome as comments.
pub fn write_sweep_csv<W: Write>(out: W, sweep: &ModelSweep) -> Result<(), csv::Error> {
    let mut out = out;
    writeln!(out, "# units: k=components, aic=nats (2p - 2 loglik), bic=nats (p ln n - 2 loglik), loglik=nats")?;
    writeln!(
        out,
        "# chosen_k={} selection_rule={} min_aic_k={}",
        sweep.chosen_k,
        match sweep.selection_rule {
            SelectionRule::MinAic => "min-aic",
            SelectionRule::FixedK => "fixed-k",
        },
        sweep.min_aic_k
    )?;
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["k", "aic", "bic", "loglik"])?;
    for e in &sweep.entries {
        wtr.write_record([
            e.k.to_string(),
            e.aic.to_string(),
            e.bic.to_string(),
            e.log_likelihood.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Timestamped residuals of `records` under the ratio model of their mode.
pub fn scored_residuals(
    records: &[ScadaRecord],
    labels: &[ModeLabel],
    gate: &RetainedModeSet,
) -> Vec<(DateTime<Utc>, ModeLabel, f64)> {
    residual_points(records, labels, gate)
        .into_iter()
        .map(|p| (p.timestamp, p.mode, p.residual))
        .collect()
}
