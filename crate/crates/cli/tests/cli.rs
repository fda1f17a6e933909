use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cbm_core::ingest::{load_scada, ColumnProfile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gearbox-cbm"))
        .arg("--output")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_input_is_an_ingest_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = cli(dir.path(), &["monitor", "--input", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn bad_configuration_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let occupancy = write(dir.path(), "occ.toml", "[simulate]\noccupancy = [0.5, 0.5, 0.5, 0.0, 0.0, 0.0]\n");
    let out = cli(dir.path(), &["--config", &occupancy, "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("occupancy"));

    let unknown = write(dir.path(), "typo.toml", "[monitor]\nr2_treshold = 0.9\n");
    assert_eq!(cli(dir.path(), &["--config", &unknown, "report"]).status.code(), Some(2));

    let same_year = cli(dir.path(), &["monitor", "--input", &occupancy, "--train-year", "2017", "--validate-year", "2017"]);
    assert_eq!(same_year.status.code(), Some(2));

    assert_eq!(cli(dir.path(), &["report"]).status.code(), Some(2));
}

#[test]
fn simulated_files_reload_without_drops() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(dir.path(), &["--seed", "5", "simulate", "--turbines", "T01,T02", "--years", "2016"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for id in ["T01", "T02"] {
        let path = dir.path().join(format!("scada_{id}.csv"));
        let first = fs::read_to_string(&path).unwrap();
        assert!(first.starts_with("# units:"));
        let report = load_scada(&path, &ColumnProfile::canonical()).unwrap();
        assert_eq!(report.dropped, 0);
        assert_eq!(report.duplicates, 0);
        assert_eq!(report.records.len(), 52_704);
        assert!(report.records.iter().all(|r| r.turbine_id == id));
        assert!(dir.path().join(format!("truth_{id}.csv")).is_file());
    }
}

#[test]
fn sweep_csv_records_the_min_aic_choice() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut csv = String::from("timestamp,turbine_id,wind_speed_avg,power_avg,rotor_rpm_avg,gen_rpm_avg,pitch_angle_avg\n");
    let start = chrono::NaiveDate::from_ymd_opt(2016, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    for i in 0..1500 {
        let ts = start + chrono::Duration::minutes(10 * i);
        let rotor = 12.0 + noise.sample(&mut rng);
        csv.push_str(&format!(
            "{}Z,T01,{},{},{},{},{}\n",
            ts.format("%Y-%m-%dT%H:%M:%S"),
            8.0 + noise.sample(&mut rng),
            900.0 + 50.0 * noise.sample(&mut rng),
            rotor,
            120.0 * rotor + noise.sample(&mut rng),
            noise.sample(&mut rng),
        ));
    }
    let input = write(dir.path(), "one.csv", &csv);
    let out = cli(
        dir.path(),
        &["cluster", "--input", &input, "--selection", "min-aic", "--k-min", "1", "--k-max", "3"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = fs::read_to_string(dir.path().join("sweep_T01.csv")).unwrap();
    let mut lines = sweep.lines();
    assert!(lines.next().unwrap().starts_with("# units:"));
    let meta = lines.next().unwrap();
    assert_eq!(lines.next().unwrap(), "k,aic,bic,loglik");
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    let best = rows.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    assert!(meta.contains(&format!("chosen_k={best}")), "{meta}");
    assert!(meta.contains("selection_rule=min-aic"), "{meta}");
    assert!(dir.path().join("model_T01.json").is_file());
    assert!(dir.path().join("report.txt").is_file());
}
