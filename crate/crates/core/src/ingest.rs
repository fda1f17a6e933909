//! SCADA CSV ingestion: column mapping, validation, ordering and the
//! calendar-year train/validate split.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical column order of the normalized record file.
pub const CANONICAL_HEADER: [&str; 7] = [
    "timestamp",
    "turbine_id",
    "wind_speed_avg",
    "power_avg",
    "rotor_rpm_avg",
    "gen_rpm_avg",
    "pitch_angle_avg",
];

/// Unit annotation written as a `#` comment line ahead of the header.
pub const CANONICAL_UNITS: &str = "# units: timestamp=UTC ISO-8601, turbine_id=id, wind_speed_avg=m/s, \
power_avg=kW, rotor_rpm_avg=rpm, gen_rpm_avg=rpm, pitch_angle_avg=deg";

/// Loads with more than this fraction of rows rejected are treated as a schema mismatch.
pub const MAX_DROP_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("{path}: malformed CSV header: {source}")]
    Header { path: PathBuf, source: csv::Error },
    #[error("{path}: missing mapped column '{column}'")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: {dropped} of {rows} rows rejected, check the column profile")]
    TooManyDropped {
        path: PathBuf,
        dropped: usize,
        rows: usize,
    },
    #[error("no records to split")]
    Empty,
    #[error("no records fall in training year {0}")]
    EmptyTrain(i32),
    #[error("write failed: {0}")]
    Write(#[from] csv::Error),
}

/// One 10-minute observation of one turbine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScadaRecord {
    pub timestamp: DateTime<Utc>,
    pub turbine_id: String,
    /// m/s
    pub wind_speed_avg: f64,
    /// kW; negative while the turbine draws from the grid.
    pub power_avg: f64,
    pub rotor_rpm_avg: f64,
    pub gen_rpm_avg: f64,
    /// degrees
    pub pitch_angle_avg: f64,
}

impl ScadaRecord {
    /// Record-level validity: finite numerics, non-negative speeds.
    pub fn is_valid(&self) -> bool {
        let finite = [
            self.wind_speed_avg,
            self.power_avg,
            self.rotor_rpm_avg,
            self.gen_rpm_avg,
            self.pitch_angle_avg,
        ]
        .iter()
        .all(|v| v.is_finite());
        finite && self.wind_speed_avg >= 0.0 && self.rotor_rpm_avg >= 0.0 && self.gen_rpm_avg >= 0.0
    }
}

/// Maps source column names onto record fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnProfile {
    pub timestamp: String,
    pub turbine_id: String,
    pub wind_speed: String,
    pub power: String,
    pub rotor_rpm: String,
    pub gen_rpm: String,
    pub pitch_angle: String,
}

impl ColumnProfile {
    /// Column names of the EDP open-data SCADA export.
    pub fn edp() -> Self {
        Self {
            timestamp: "Timestamp".into(),
            turbine_id: "Turbine_ID".into(),
            wind_speed: "Amb_WindSpeed_Avg".into(),
            power: "Grd_Prod_Pwr_Avg".into(),
            rotor_rpm: "Rtr_RPM_Avg".into(),
            gen_rpm: "Gen_RPM_Avg".into(),
            pitch_angle: "Blds_PitchAngle_Avg".into(),
        }
    }

    /// Names used by [`write_records`] and the synthetic generator.
    pub fn canonical() -> Self {
        Self {
            timestamp: CANONICAL_HEADER[0].into(),
            turbine_id: CANONICAL_HEADER[1].into(),
            wind_speed: CANONICAL_HEADER[2].into(),
            power: CANONICAL_HEADER[3].into(),
            rotor_rpm: CANONICAL_HEADER[4].into(),
            gen_rpm: CANONICAL_HEADER[5].into(),
            pitch_angle: CANONICAL_HEADER[6].into(),
        }
    }

    fn columns(&self) -> [&str; 7] {
        [
            &self.timestamp,
            &self.turbine_id,
            &self.wind_speed,
            &self.power,
            &self.rotor_rpm,
            &self.gen_rpm,
            &self.pitch_angle,
        ]
    }
}

impl Default for ColumnProfile {
    fn default() -> Self {
        Self::edp()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub records: Vec<ScadaRecord>,
    /// Data rows seen, excluding the header and `#` comment lines.
    pub rows_read: usize,
    /// Rows rejected for unparseable, missing or out-of-range values.
    pub dropped: usize,
    /// Rows collapsed because an earlier row had the same turbine and timestamp.
    pub duplicates: usize,
}

/// Parses the timestamp formats seen in SCADA exports. Offset-less values are taken as UTC.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    let raw = raw.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(raw) {
        return Some(ts.with_timezone(&Utc));
    }
    if let Ok(ts) = DateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S%:z") {
        return Some(ts.with_timezone(&Utc));
    }
    const NAIVE: [&str; 4] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ];
    NAIVE
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|naive| naive.and_utc())
}

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// First line that is not a `#` comment.
fn header_line(bytes: &[u8]) -> &[u8] {
    bytes
        .split(|&b| b == b'\n')
        .find(|line| !line.starts_with(b"#"))
        .unwrap_or(&[])
}

/// `;` when the header has semicolons but no commas, `,` otherwise.
fn sniff_delimiter(bytes: &[u8]) -> u8 {
    let header = header_line(bytes);
    if header.contains(&b';') && !header.contains(&b',') {
        b';'
    } else {
        b','
    }
}

/// Picks the canonical profile when the file header carries every canonical
/// column, the EDP profile otherwise.
pub fn detect_profile(path: &Path) -> Result<ColumnProfile, IngestError> {
    let open_err = |source| IngestError::Open {
        path: path.to_path_buf(),
        source,
    };
    let mut head = Vec::new();
    File::open(path)
        .map_err(open_err)?
        .take(64 * 1024)
        .read_to_end(&mut head)
        .map_err(open_err)?;
    let delim = sniff_delimiter(&head) as char;
    let fields: Vec<String> = String::from_utf8_lossy(header_line(&head))
        .split(delim)
        .map(|f| f.trim().trim_matches('"').to_string())
        .collect();
    let canonical = ColumnProfile::canonical();
    Ok(if canonical.columns().iter().all(|c| fields.iter().any(|f| f == c)) {
        canonical
    } else {
        ColumnProfile::edp()
    })
}

/// Loads one CSV file. See [`load_scada_from_reader`].
pub fn load_scada(path: &Path, profile: &ColumnProfile) -> Result<LoadReport, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Open {
        path: path.to_path_buf(),
        source,
    })?;
    load_scada_from_reader(file, path, profile)
}

/// Loads several files as one stream; duplicates across files keep the first occurrence.
pub fn load_many(paths: &[PathBuf], profile: &ColumnProfile) -> Result<LoadReport, IngestError> {
    let mut merged = LoadReport::default();
    for path in paths {
        let part = load_scada(path, profile)?;
        merged.rows_read += part.rows_read;
        merged.dropped += part.dropped;
        merged.duplicates += part.duplicates;
        merged.records.extend(part.records);
    }
    merged.duplicates += sort_dedup(&mut merged.records);
    Ok(merged)
}

pub fn load_scada_from_reader<R: Read>(
    reader: R,
    origin: &Path,
    profile: &ColumnProfile,
) -> Result<LoadReport, IngestError> {
    let mut reader = reader;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|source| IngestError::Open {
        path: origin.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .delimiter(sniff_delimiter(&bytes))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let headers = rdr
        .headers()
        .map_err(|source| IngestError::Header {
            path: origin.to_path_buf(),
            source,
        })?
        .clone();

    let mut idx = [0usize; 7];
    for (slot, name) in idx.iter_mut().zip(profile.columns()) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn {
                path: origin.to_path_buf(),
                column: name.to_string(),
            })?;
    }

    let mut report = LoadReport::default();
    let mut row = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut row) {
            Ok(true) => {}
            Ok(false) => break,
            Err(err) => {
                // Invalid UTF-8 and similar are row-level faults; I/O failures are not.
                if matches!(err.kind(), csv::ErrorKind::Io(_)) {
                    return Err(IngestError::Open {
                        path: origin.to_path_buf(),
                        source: io::Error::other(err.to_string()),
                    });
                }
                report.rows_read += 1;
                report.dropped += 1;
                continue;
            }
        }
        report.rows_read += 1;
        match parse_row(&row, &idx) {
            Some(rec) => report.records.push(rec),
            None => report.dropped += 1,
        }
    }

    if report.rows_read > 0
        && report.dropped as f64 > MAX_DROP_FRACTION * report.rows_read as f64
    {
        return Err(IngestError::TooManyDropped {
            path: origin.to_path_buf(),
            dropped: report.dropped,
            rows: report.rows_read,
        });
    }
    report.duplicates = sort_dedup(&mut report.records);
    Ok(report)
}

fn parse_row(row: &csv::StringRecord, idx: &[usize; 7]) -> Option<ScadaRecord> {
    let field = |i: usize| row.get(idx[i]).filter(|s| !s.is_empty());
    let num = |i: usize| field(i)?.parse::<f64>().ok();
    let rec = ScadaRecord {
        timestamp: parse_timestamp(field(0)?)?,
        turbine_id: field(1)?.to_string(),
        wind_speed_avg: num(2)?,
        power_avg: num(3)?,
        rotor_rpm_avg: num(4)?,
        gen_rpm_avg: num(5)?,
        pitch_angle_avg: num(6)?,
    };
    rec.is_valid().then_some(rec)
}

/// Stable sort by (turbine, timestamp) and collapse repeats onto their first occurrence.
pub fn sort_dedup(records: &mut Vec<ScadaRecord>) -> usize {
    records.sort_by(|a, b| {
        a.turbine_id
            .cmp(&b.turbine_id)
            .then(a.timestamp.cmp(&b.timestamp))
    });
    let before = records.len();
    records.dedup_by(|later, earlier| {
        later.turbine_id == earlier.turbine_id && later.timestamp == earlier.timestamp
    });
    before - records.len()
}

/// Writes records in the canonical dialect, preceded by a unit comment line.
pub fn write_records<W: Write>(out: W, records: &[ScadaRecord]) -> Result<(), IngestError> {
    let mut out = out;
    writeln!(out, "{CANONICAL_UNITS}").map_err(csv::Error::from)?;
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(CANONICAL_HEADER)?;
    for r in records {
        wtr.write_record([
            format_timestamp(&r.timestamp),
            r.turbine_id.clone(),
            r.wind_speed_avg.to_string(),
            r.power_avg.to_string(),
            r.rotor_rpm_avg.to_string(),
            r.gen_rpm_avg.to_string(),
            r.pitch_angle_avg.to_string(),
        ])?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct DataSplit {
    pub train_year: i32,
    pub validate_year: i32,
    pub train: Vec<ScadaRecord>,
    pub validate: Vec<ScadaRecord>,
    /// Records outside both years.
    pub discarded: usize,
}

impl DataSplit {
    pub fn turbines(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .train
            .iter()
            .chain(&self.validate)
            .map(|r| r.turbine_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Per-turbine view of the split; turbines missing from `train` get an empty train set.
    pub fn by_turbine(&self) -> BTreeMap<String, DataSplit> {
        let mut out: BTreeMap<String, DataSplit> = BTreeMap::new();
        let blank = || DataSplit {
            train_year: self.train_year,
            validate_year: self.validate_year,
            ..Default::default()
        };
        for r in &self.train {
            out.entry(r.turbine_id.clone()).or_insert_with(blank).train.push(r.clone());
        }
        for r in &self.validate {
            out.entry(r.turbine_id.clone())
                .or_insert_with(blank)
                .validate
                .push(r.clone());
        }
        out
    }
}

pub fn split_by_year(
    records: &[ScadaRecord],
    train_year: i32,
    validate_year: i32,
) -> Result<DataSplit, IngestError> {
    if records.is_empty() {
        return Err(IngestError::Empty);
    }
    let mut split = DataSplit {
        train_year,
        validate_year,
        ..Default::default()
    };
    for r in records {
        let year = r.timestamp.year();
        if year == train_year {
            split.train.push(r.clone());
        } else if year == validate_year {
            split.validate.push(r.clone());
        } else {
            split.discarded += 1;
        }
    }
    if split.train.is_empty() {
        return Err(IngestError::EmptyTrain(train_year));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, TimeZone};

    fn load_str(s: &str) -> Result<LoadReport, IngestError> {
        load_scada_from_reader(s.as_bytes(), Path::new("mem.csv"), &ColumnProfile::edp())
    }

    const EDP_HEADER: &str =
        "Turbine_ID,Timestamp,Gen_RPM_Avg,Rtr_RPM_Avg,Amb_WindSpeed_Avg,Grd_Prod_Pwr_Avg,Blds_PitchAngle_Avg,Gen_Bear_Temp_Avg";

    #[test]
    fn well_formed_rows_load() {
        let csv = format!(
            "{EDP_HEADER}\n\
             T01,2016-01-01T00:00:00+00:00,1700.5,14.1,9.2,1500.0,-1.0,40\n\
             T01,2016-01-01T00:10:00+00:00,1701.5,14.2,9.4,1510.0,-1.1,40\n\
             T01,2016-01-01T00:20:00+00:00,0,0,1.2,-5.5,24.0,40\n"
        );
        let rep = load_str(&csv).unwrap();
        assert_eq!(rep.records.len(), 3);
        assert_eq!(rep.dropped, 0);
        assert_eq!(rep.records[2].power_avg, -5.5);
    }

    #[test]
    fn empty_rotor_cell_is_dropped() {
        let csv = format!(
            "{EDP_HEADER}\n\
             T01,2016-01-01T00:00:00+00:00,1700.5,14.1,9.2,1500.0,-1.0,40\n\
             T01,2016-01-01T00:10:00+00:00,1701.5,,9.4,1510.0,-1.1,40\n\
             T01,2016-01-01T00:20:00+00:00,1702.5,14.3,9.4,1510.0,-1.1,40\n"
        );
        let rep = load_str(&csv).unwrap();
        assert_eq!(rep.records.len(), 2);
        assert_eq!(rep.dropped, 1);
    }

    #[test]
    fn negative_speed_and_nan_are_dropped() {
        let csv = format!(
            "{EDP_HEADER}\n\
             T01,2016-01-01T00:00:00Z,1700,14,9,1500,-1,40\n\
             T01,2016-01-01T00:10:00Z,1700,-0.5,9,1500,-1,40\n\
             T01,2016-01-01T00:20:00Z,NaN,14,9,1500,-1,40\n\
             T01,2016-01-01T00:30:00Z,1700,14,9,1500,-1,40\n\
             T01,2016-01-01T00:40:00Z,1700,14,9,1500,-1,40\n"
        );
        let rep = load_str(&csv).unwrap();
        assert_eq!(rep.records.len(), 3);
        assert_eq!(rep.dropped, 2);
    }

    #[test]
    fn missing_column_names_it() {
        let err = load_str("Turbine_ID,Timestamp,Rtr_RPM_Avg\nT01,2016-01-01,1\n").unwrap_err();
        match err {
            IngestError::MissingColumn { column, .. } => assert_eq!(column, "Amb_WindSpeed_Avg"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn majority_dropped_is_fatal() {
        let csv = format!(
            "{EDP_HEADER}\n\
             T01,2016-01-01T00:00:00Z,1700,14,9,1500,-1,40\n\
             T01,x,1700,14,9,1500,-1,40\n\
             T01,2016-01-01T00:20:00Z,abc,14,9,1500,-1,40\n"
        );
        assert!(matches!(
            load_str(&csv),
            Err(IngestError::TooManyDropped { dropped: 2, rows: 3, .. })
        ));
    }

    #[test]
    fn missing_file_is_fatal_and_names_path() {
        let err = load_scada(Path::new("/nonexistent/scada.csv"), &ColumnProfile::edp()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/scada.csv"));
    }

    #[test]
    fn sorted_and_deduplicated_first_wins() {
        let csv = format!(
            "{EDP_HEADER}\n\
             T02,2016-01-01T00:10:00Z,1,1,1,1,1,0\n\
             T01,2016-01-01T00:10:00Z,2,2,2,2,2,0\n\
             T01,2016-01-01T00:00:00Z,3,3,3,3,3,0\n\
             T01,2016-01-01T00:10:00Z,4,4,4,4,4,0\n"
        );
        let rep = load_str(&csv).unwrap();
        assert_eq!(rep.duplicates, 1);
        let got: Vec<(&str, f64)> = rep
            .records
            .iter()
            .map(|r| (r.turbine_id.as_str(), r.gen_rpm_avg))
            .collect();
        assert_eq!(got, vec![("T01", 3.0), ("T01", 2.0), ("T02", 1.0)]);
    }

    #[test]
    fn timestamp_formats() {
        let want = Utc.with_ymd_and_hms(2016, 3, 4, 5, 10, 0).unwrap();
        for raw in [
            "2016-03-04T05:10:00+00:00",
            "2016-03-04T05:10:00Z",
            "2016-03-04 05:10:00",
            "2016-03-04T05:10",
            "2016-03-04 06:10:00+01:00",
        ] {
            assert_eq!(parse_timestamp(raw), Some(want), "{raw}");
        }
        assert_eq!(parse_timestamp("04/03/2016"), None);
    }

    fn rec(ts: DateTime<Utc>) -> ScadaRecord {
        ScadaRecord {
            timestamp: ts,
            turbine_id: "T01".into(),
            wind_speed_avg: 5.0,
            power_avg: 100.0,
            rotor_rpm_avg: 10.0,
            gen_rpm_avg: 1200.0,
            pitch_angle_avg: 0.0,
        }
    }

    #[test]
    fn split_partitions_by_calendar_year() {
        let recs: Vec<_> = [
            Utc.with_ymd_and_hms(2015, 12, 31, 23, 50, 0).unwrap(),
            Utc.with_ymd_and_hms(2016, 1, 1, 0, 0, 0).unwrap(),
            Utc.with_ymd_and_hms(2016, 12, 31, 23, 50, 0).unwrap(),
            Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap(),
            Utc.with_ymd_and_hms(2017, 12, 31, 23, 50, 0).unwrap(),
            Utc.with_ymd_and_hms(2018, 1, 1, 0, 0, 0).unwrap(),
        ]
        .into_iter()
        .map(rec)
        .collect();
        let split = split_by_year(&recs, 2016, 2017).unwrap();
        assert_eq!(split.train.len(), 2);
        assert_eq!(split.validate.len(), 2);
        assert_eq!(split.discarded, 2);
    }

    #[test]
    fn split_counts_match_grid_enumeration() {
        // Two turbines on a 10-minute grid over 2017-2018 (both 365-day years).
        let start = Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap();
        let end = Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap();
        let mut recs = Vec::new();
        for id in ["T01", "T02"] {
            let mut ts = start;
            while ts < end {
                let mut r = rec(ts);
                r.turbine_id = id.into();
                recs.push(r);
                ts += Duration::minutes(10);
            }
        }
        // Counting oracle: 365 days * 144 slots * 2 turbines.
        let per_year = 365 * 144 * 2;
        assert_eq!(per_year, 105_120);
        let split = split_by_year(&recs, 2017, 2018).unwrap();
        assert_eq!(split.train.len(), per_year);
        assert_eq!(split.validate.len(), per_year);
        assert_eq!(split.by_turbine().len(), 2);
    }

    #[test]
    fn empty_train_is_fatal() {
        let recs = vec![rec(Utc.with_ymd_and_hms(2017, 5, 1, 0, 0, 0).unwrap())];
        assert!(matches!(
            split_by_year(&recs, 2016, 2017),
            Err(IngestError::EmptyTrain(2016))
        ));
        assert!(matches!(split_by_year(&[], 2016, 2017), Err(IngestError::Empty)));
    }

    #[test]
    fn semicolon_export_loads() {
        let csv = format!(
            "{}\nT01;2016-01-01 00:00:00;1700.5;14.1;9.2;1500.0;-1.0;40\n",
            EDP_HEADER.replace(',', ";")
        );
        let rep = load_str(&csv).unwrap();
        assert_eq!(rep.records.len(), 1);
        assert_eq!(rep.records[0].gen_rpm_avg, 1700.5);
    }

    #[test]
    fn profile_detection() {
        let dir = tempfile::tempdir().unwrap();
        let canon = dir.path().join("canon.csv");
        let mut buf = Vec::new();
        write_records(&mut buf, &[]).unwrap();
        std::fs::write(&canon, &buf).unwrap();
        assert_eq!(detect_profile(&canon).unwrap(), ColumnProfile::canonical());
        let edp = dir.path().join("edp.csv");
        std::fs::write(&edp, format!("{EDP_HEADER}\n")).unwrap();
        assert_eq!(detect_profile(&edp).unwrap(), ColumnProfile::edp());
        assert!(matches!(
            detect_profile(&dir.path().join("missing.csv")),
            Err(IngestError::Open { .. })
        ));
    }
}
