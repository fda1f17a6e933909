use cbm_core::ingest::split_by_year;
use cbm_core::modes::ModeLabel;
use cbm_core::pipeline::{cluster_turbine, monitor_turbine, ClusterSettings, MonitorSettings, TurbineStatus};
use cbm_core::synth::{default_modes, generate, DriftShape, DriftSpec, SynthConfig};

fn one_turbine(years: Vec<i32>, drift: Vec<DriftSpec>) -> SynthConfig {
    SynthConfig {
        turbines: vec!["T01".into()],
        years,
        seed: 7,
        drift,
        ..SynthConfig::default()
    }
}

#[test]
fn clusters_recover_generating_modes() {
    let turbine = generate(&one_turbine(vec![2016], vec![])).unwrap().remove(0);
    let settings = ClusterSettings::default().operational();
    let c = cluster_turbine("T01", &turbine.records, &settings).unwrap();
    assert_eq!(c.sweep.chosen_k, 6);
    let agree = c
        .assignments
        .iter()
        .zip(&turbine.truth)
        .filter(|(&a, t)| c.labeled.mapping[a] == t.true_mode)
        .count();
    let frac = agree as f64 / turbine.truth.len() as f64;
    eprintln!("agreement {frac:.4}, labels {:?}", c.labeled.mapping);
    assert!(frac >= 0.95, "agreement {frac}");
    let mut labels = c.labeled.mapping.clone();
    labels.sort();
    assert_eq!(labels, ModeLabel::ALL.to_vec());
}

#[test]
fn injected_step_is_flagged_in_validation_only() {
    let drift = vec![DriftSpec {
        turbine: "T01".into(),
        year: 2017,
        week: 20,
        shape: DriftShape::Step,
        magnitude: 2.0,
        ramp_weeks: 8,
    }];
    let turbine = generate(&one_turbine(vec![2016, 2017], drift)).unwrap().remove(0);
    let split = split_by_year(&turbine.records, 2016, 2017).unwrap();
    let m = monitor_turbine("T01", &split, &MonitorSettings::default()).unwrap();
    assert_eq!(m.status, TurbineStatus::Monitored);
    let retained: Vec<_> = m.gate.retained.iter().map(|r| (r.mode, r.r_squared)).collect();
    eprintln!("retained {retained:?}");
    // Four standard errors of an OLS slope with unit noise and the mode's rotor spread.
    let modes = default_modes();
    for r in &m.gate.retained {
        let rotor_sd = modes.iter().find(|p| p.label == r.mode).unwrap().sd[1];
        let tol = 4.0 / (rotor_sd * (r.n as f64).sqrt());
        assert!((r.slope - 120.0).abs() < tol, "{:?} slope {} tol {tol}", r.mode, r.slope);
    }
    let flags = m.flags();
    eprintln!("flags {flags:?}");
    let validate: Vec<_> = flags
        .iter()
        .filter(|f| f.period == cbm_core::pipeline::Period::Validate)
        .collect();
    // The step is far outside the limits, so the first week carrying it must be flagged.
    let first = validate.iter().find(|f| f.value > 1.0).expect("drift flagged");
    assert_eq!(first.iso_year, 2017);
    assert!(first.iso_week >= 20 && first.iso_week <= 22, "first flag week {}", first.iso_week);
    let early = validate.iter().filter(|f| f.iso_week < 20).count();
    assert!(early <= 3, "{early} flags before the step");
}
