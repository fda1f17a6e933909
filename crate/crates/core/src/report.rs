//! Per-mode statistics and the human-readable run report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ingest::ScadaRecord;
use crate::modes::ModeLabel;
use crate::pipeline::{ClusterSummary, MonitorSummary, TurbineStatus};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Count and min/max/mean of each feature for one mode, original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStatsRow {
    pub mode: ModeLabel,
    pub count: usize,
    /// m/s
    pub wind_speed: FeatureStats,
    /// rpm
    pub rotor_rpm: FeatureStats,
    /// deg
    pub pitch_angle: FeatureStats,
    /// kW
    pub power: FeatureStats,
}

/// One row per label present, in label declaration order. `assignments[i]`
/// is the cluster index of `records[i]`; `mapping` labels cluster indices.
pub fn mode_stats(records: &[ScadaRecord], assignments: &[usize], mapping: &[ModeLabel]) -> Vec<ModeStatsRow> {
    assert_eq!(records.len(), assignments.len(), "assignments must cover records");
    #[derive(Default)]
    struct Acc {
        count: usize,
        min: [f64; 4],
        max: [f64; 4],
        sum: [f64; 4],
    }
    let mut acc: BTreeMap<ModeLabel, Acc> = BTreeMap::new();
    for (r, &c) in records.iter().zip(assignments) {
        let v = [r.wind_speed_avg, r.rotor_rpm_avg, r.pitch_angle_avg, r.power_avg];
        let a = acc.entry(mapping[c]).or_insert_with(|| Acc {
            min: [f64::INFINITY; 4],
            max: [f64::NEG_INFINITY; 4],
            ..Default::default()
        });
        a.count += 1;
        for d in 0..4 {
            a.min[d] = a.min[d].min(v[d]);
            a.max[d] = a.max[d].max(v[d]);
            a.sum[d] += v[d];
        }
    }
    acc.into_iter()
        .map(|(mode, a)| {
            let stat = |d: usize| FeatureStats {
                min: a.min[d],
                max: a.max[d],
                // Clamp guards the last-ulp excursions of a rounded mean.
                mean: (a.sum[d] / a.count as f64).clamp(a.min[d], a.max[d]),
            };
            ModeStatsRow {
                mode,
                count: a.count,
                wind_speed: stat(0),
                rotor_rpm: stat(1),
                pitch_angle: stat(2),
                power: stat(3),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub clustering: Option<ClusterSummary>,
    pub monitoring: Option<MonitorSummary>,
}

pub fn render_text(report: &RunReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Gearbox condition monitoring report");
    let _ = writeln!(out, "===================================");
    if let Some(c) = &report.clustering {
        let _ = writeln!(out, "\nOperating-mode clustering (seed {})", c.seed);
        for t in &c.turbines {
            let _ = writeln!(
                out,
                "\n[{}] chosen k = {} ({}), min-AIC k = {}, match cost {:.4}",
                t.turbine_id,
                t.sweep.chosen_k,
                match t.sweep.selection_rule {
                    crate::mixture::SelectionRule::MinAic => "min-aic",
                    crate::mixture::SelectionRule::FixedK => "fixed-k",
                },
                t.sweep.min_aic_k,
                t.match_cost
            );
            let _ = writeln!(out, "  {:>3} {:>16} {:>16} {:>16}", "k", "AIC", "BIC", "log-lik");
            for e in &t.sweep.entries {
                let _ = writeln!(out, "  {:>3} {:>16.2} {:>16.2} {:>16.2}", e.k, e.aic, e.bic, e.log_likelihood);
            }
            let labels: Vec<&str> = t.cluster_labels.iter().map(|l| l.as_str()).collect();
            let _ = writeln!(out, "  cluster labels: {}", labels.join(", "));
            write_mode_table(&mut out, &t.mode_stats);
        }
    }
    if let Some(m) = &report.monitoring {
        let _ = writeln!(
            out,
            "\nSpeed-ratio monitoring (train {}, validate {}, pooling {}, R² threshold {})",
            m.train_year,
            m.validate_year,
            match m.pooling {
                crate::drift::Pooling::Pooled => "pooled",
                crate::drift::Pooling::PerMode => "per-mode",
            },
            m.r2_threshold
        );
        for t in &m.turbines {
            let _ = writeln!(out, "\n[{}] {}", t.turbine_id, match &t.status {
                TurbineStatus::Monitored => "monitored".to_string(),
                TurbineStatus::Excluded { reason } => format!("excluded: {reason}"),
            });
            let _ = writeln!(out, "  {:<18} {:>12} {:>12} {:>10} {:>8} status", "mode", "slope", "intercept", "R²", "n");
            for r in &t.ratio_models {
                let _ = writeln!(
                    out,
                    "  {:<18} {:>12.6} {:>12.4} {:>10.6} {:>8} {}",
                    r.model.mode.as_str(),
                    r.model.slope,
                    r.model.intercept,
                    r.model.r_squared,
                    r.model.n,
                    if r.retained { "retained" } else { "rejected" }
                );
            }
            for rej in t.rejected.iter().filter(|r| r.r_squared.is_none()) {
                let _ = writeln!(out, "  {:<18} not fitted: {}", rej.mode.as_str(), rej.reason);
            }
            for s in &t.series {
                let name = s.mode.map(|m| m.as_str()).unwrap_or("pooled");
                let _ = writeln!(
                    out,
                    "  chart {name}: center {:.5}, sigma {:.5}, limits [{:.5}, {:.5}], {} baseline weeks",
                    s.center, s.sigma, s.lcl, s.ucl, s.baseline_weeks
                );
            }
            if t.flags.is_empty() {
                let _ = writeln!(out, "  no drift flags");
            }
            for f in &t.flags {
                let _ = writeln!(
                    out,
                    "  flag {}-W{:02} {:<8} {:<20} {:>10.4} rpm{}",
                    f.iso_year,
                    f.iso_week,
                    f.period.as_str(),
                    f.rule.as_str(),
                    f.value,
                    f.mode.map(|m| format!(" ({m})")).unwrap_or_default()
                );
            }
        }
    }
    out
}

fn write_mode_table(out: &mut String, rows: &[ModeStatsRow]) {
    let _ = writeln!(
        out,
        "  {:<18} {:>7} {:>20} {:>20} {:>22} {:>26}",
        "mode", "count", "wind m/s min/max/mean", "rotor rpm", "pitch deg", "power kW"
    );
    let fmt = |s: &FeatureStats| format!("{:.1}/{:.1}/{:.1}", s.min, s.max, s.mean);
    for r in rows {
        let _ = writeln!(
            out,
            "  {:<18} {:>7} {:>20} {:>20} {:>22} {:>26}",
            r.mode.as_str(),
            r.count,
            fmt(&r.wind_speed),
            fmt(&r.rotor_rpm),
            fmt(&r.pitch_angle),
            fmt(&r.power)
        );
    }
}
