use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cbm_core::drift::Pooling;
use cbm_core::ingest::{
    detect_profile, format_timestamp, load_scada, sort_dedup, split_by_year, write_records, ColumnProfile,
    DataSplit, IngestError,
};
use cbm_core::pipeline::{
    cluster_turbine, for_each_turbine, monitor_turbine, write_sweep_csv, ClusterSummary, ModelDocument,
    MonitorSummary, PipelineError, Stage, TurbineClusters, TurbineMonitor, TurbineStatus,
};
use cbm_core::report::{render_text, ModeStatsRow, RunReport};
use cbm_core::synth::{generate, write_truth, SynthError};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ProfileName, ProfileSetting, RunConfig};

pub const CLUSTER_SUMMARY: &str = "cluster_summary.json";
pub const MONITOR_SUMMARY: &str = "monitor_summary.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("modeling failed: {0}")]
    Model(String),
    #[error("monitoring failed: {0}")]
    Monitor(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Ingest(_) => 3,
            CliError::Model(_) => 4,
            CliError::Monitor(_) => 5,
            CliError::Io { .. } => 1,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e.stage() {
            Stage::Ingest => match e {
                PipelineError::Ingest(inner) => CliError::Ingest(inner),
                other => CliError::Model(other.to_string()),
            },
            Stage::Modeling => CliError::Model(e.to_string()),
            Stage::Monitoring => CliError::Monitor(e.to_string()),
        }
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

/// Writes `dir/name` through a temporary file in the same directory, so a
/// reader never sees a partial file.
fn write_atomic<F>(dir: &Path, name: &str, fill: F) -> Result<PathBuf, CliError>
where
    F: FnOnce(&mut dyn Write) -> Result<(), BoxError>,
{
    let path = dir.join(name);
    let io_err = |message: String| CliError::Io {
        path: path.clone(),
        message,
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(e.to_string()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w).map_err(|e| io_err(e.to_string()))?;
        w.flush().map_err(|e| io_err(e.to_string()))?;
    }
    tmp.persist(&path).map_err(|e| io_err(e.to_string()))?;
    Ok(path)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    write_atomic(dir, name, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, CliError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => {
            return Err(CliError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
        }
    };
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn prepare_output(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn load_split(cfg: &RunConfig) -> Result<DataSplit, CliError> {
    if cfg.data.inputs.is_empty() {
        return Err(ConfigError::Invalid("no input files given (use --input or data.inputs)".into()).into());
    }
    let mut records = Vec::new();
    for path in &cfg.data.inputs {
        let profile = match &cfg.data.profile {
            ProfileSetting::Named(ProfileName::Auto) => detect_profile(path)?,
            ProfileSetting::Named(ProfileName::Edp) => ColumnProfile::edp(),
            ProfileSetting::Named(ProfileName::Canonical) => ColumnProfile::canonical(),
            ProfileSetting::Custom(p) => p.clone(),
        };
        let rep = load_scada(path, &profile)?;
        info!(
            "{}: {} rows, {} dropped, {} duplicates",
            path.display(),
            rep.rows_read,
            rep.dropped,
            rep.duplicates
        );
        records.extend(rep.records);
    }
    let dups = sort_dedup(&mut records);
    if dups > 0 {
        info!("{dups} duplicate rows across input files removed");
    }
    let split = split_by_year(&records, cfg.data.train_year, cfg.data.validate_year)?;
    info!(
        "train {}: {} records, validate {}: {} records, {} outside both years",
        split.train_year,
        split.train.len(),
        split.validate_year,
        split.validate.len(),
        split.discarded
    );
    Ok(split)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let turbines = generate(&cfg.synth()).map_err(|e| match e {
        SynthError::InvalidConfig(m) => CliError::Config(ConfigError::Invalid(m)),
        SynthError::Write(e) => CliError::Io {
            path: cfg.output.clone(),
            message: e.to_string(),
        },
    })?;
    prepare_output(&cfg.output)?;
    for t in &turbines {
        let id = file_safe(&t.turbine_id);
        write_atomic(&cfg.output, &format!("scada_{id}.csv"), |w| Ok(write_records(w, &t.records)?))?;
        write_atomic(&cfg.output, &format!("truth_{id}.csv"), |w| Ok(write_truth(w, &t.truth)?))?;
        info!("{}: {} records", t.turbine_id, t.records.len());
    }
    Ok(())
}

fn write_cluster_files(dir: &Path, split: &DataSplit, c: &TurbineClusters) -> Result<(), CliError> {
    let id = file_safe(&c.turbine_id);
    write_json(dir, &format!("model_{id}.json"), &ModelDocument::new(&c.turbine_id, &c.labeled))?;
    write_atomic(dir, &format!("sweep_{id}.csv"), |w| Ok(write_sweep_csv(w, &c.sweep)?))?;
    write_atomic(dir, &format!("mode_stats_{id}.csv"), |w| write_mode_stats(w, &c.mode_stats))?;
    let train: Vec<_> = split.train.iter().filter(|r| r.turbine_id == c.turbine_id).collect();
    write_atomic(dir, &format!("clusters_{id}.csv"), |w| {
        writeln!(
            w,
            "# units: timestamp=UTC ISO-8601, wind_speed=m/s, rotor_rpm=rpm, pitch_angle=deg, power=kW, cluster=component index"
        )?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["timestamp", "wind_speed", "rotor_rpm", "pitch_angle", "power", "cluster", "mode"])?;
        for (r, &k) in train.iter().zip(&c.assignments) {
            out.write_record([
                format_timestamp(&r.timestamp),
                r.wind_speed_avg.to_string(),
                r.rotor_rpm_avg.to_string(),
                r.pitch_angle_avg.to_string(),
                r.power_avg.to_string(),
                k.to_string(),
                c.labeled.mapping[k].as_str().to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    Ok(())
}

fn write_mode_stats(w: &mut dyn Write, rows: &[ModeStatsRow]) -> Result<(), BoxError> {
    writeln!(w, "# units: count=records, wind_speed=m/s, rotor_rpm=rpm, pitch_angle=deg, power=kW")?;
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["mode".to_string(), "count".to_string()];
    for f in ["wind_speed", "rotor_rpm", "pitch_angle", "power"] {
        for s in ["min", "max", "mean"] {
            header.push(format!("{f}_{s}"));
        }
    }
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.mode.as_str().to_string(), r.count.to_string()];
        for s in [r.wind_speed, r.rotor_rpm, r.pitch_angle, r.power] {
            rec.extend([s.min.to_string(), s.max.to_string(), s.mean.to_string()]);
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn cluster(cfg: &RunConfig) -> Result<(), CliError> {
    let split = load_split(cfg)?;
    let settings = cfg.cluster_settings();
    let clusters = for_each_turbine(&split, |id, s| cluster_turbine(id, &s.train, &settings))?;
    prepare_output(&cfg.output)?;
    for c in &clusters {
        write_cluster_files(&cfg.output, &split, c)?;
    }
    write_json(
        &cfg.output,
        CLUSTER_SUMMARY,
        &ClusterSummary::new(cfg.seed, split.train_year, &clusters),
    )?;
    report(cfg)
}

fn drift_file_name(turbine: &str, mode: Option<cbm_core::modes::ModeLabel>) -> String {
    match mode {
        None => format!("drift_{}.csv", file_safe(turbine)),
        Some(m) => format!("drift_{}_{}.csv", file_safe(turbine), m.slug()),
    }
}

pub fn monitor(cfg: &RunConfig) -> Result<(), CliError> {
    let split = load_split(cfg)?;
    let settings = cfg.monitor_settings();
    let monitors: Vec<TurbineMonitor> = for_each_turbine(&split, |id, s| monitor_turbine(id, s, &settings))?;
    prepare_output(&cfg.output)?;
    for m in &monitors {
        // Same seed and k as the cluster command, hence the same model file.
        let doc = ModelDocument::new(&m.turbine_id, &m.clusters.labeled);
        write_json(&cfg.output, &format!("model_{}.json", file_safe(&m.turbine_id)), &doc)?;
        for s in &m.series {
            let name = drift_file_name(&m.turbine_id, s.chart.mode);
            write_atomic(&cfg.output, &name, |w| Ok(s.write_csv(w)?))?;
        }
    }
    let summary = MonitorSummary::new(&split, &settings, &monitors);
    write_json(&cfg.output, "ratio_models.json", &summary.ratio_models())?;
    write_json(&cfg.output, "summary.json", &summary.flag_summary())?;
    write_json(&cfg.output, MONITOR_SUMMARY, &summary)?;
    report(cfg)?;

    for m in &monitors {
        match &m.status {
            TurbineStatus::Monitored => info!(
                "{}: {} flags ({} pooling)",
                m.turbine_id,
                m.flags().len(),
                match settings.pooling {
                    Pooling::Pooled => "pooled",
                    Pooling::PerMode => "per-mode",
                }
            ),
            TurbineStatus::Excluded { reason } => log::warn!("{} excluded: {reason}", m.turbine_id),
        }
    }
    if monitors.iter().all(|m| m.status != TurbineStatus::Monitored) {
        return Err(PipelineError::NothingMonitored.into());
    }
    Ok(())
}

/// Rebuilds `report.json` and `report.txt` from the summaries in the output directory.
pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = &cfg.output;
    let clustering: Option<ClusterSummary> = read_json(&dir.join(CLUSTER_SUMMARY))?;
    let monitoring: Option<MonitorSummary> = read_json(&dir.join(MONITOR_SUMMARY))?;
    if clustering.is_none() && monitoring.is_none() {
        return Err(ConfigError::Invalid(format!(
            "nothing to report: no {CLUSTER_SUMMARY} or {MONITOR_SUMMARY} in {}",
            dir.display()
        ))
        .into());
    }
    let report = RunReport { clustering, monitoring };
    write_json(dir, "report.json", &report)?;
    write_atomic(dir, "report.txt", |w| {
        w.write_all(render_text(&report).as_bytes())?;
        Ok(())
    })?;
    Ok(())
}
