use frk_core::em::EmConfig;
use frk_core::evaluation::{cross_validate, fit_lognormal_baseline, kfold_split, rmse, CvConfig, CvMethod};
use frk_core::geometry::{BoundingBox, Location, Measurement};
use frk_core::multicell::{antenna_gain, cid_error_report, fit_cells, AntennaSpec, CellDomain, CellSpec, MulticellFitConfig, TrendKind};
use frk_core::synthetic::{default_multicell_scenario, gen_lognormal, gen_multicell, Sampling, ScenarioSpec};
use frk_core::trend::TrendSpec;

#[test]
fn gain_reference_values() {
    let a = AntennaSpec::new(Location::new(0.0, 0.0), 0.0);
    // Azimuth is counter-clockwise from the +x axis.
    assert_eq!(antenna_gain(&Location::new(100.0, 0.0), &a), 0.0);
    let at = |deg: f64| Location::new(100.0 * deg.to_radians().cos(), 100.0 * deg.to_radians().sin());
    assert!((antenna_gain(&at(65.0), &a) + 12.0).abs() < 1e-9);
    assert_eq!(antenna_gain(&at(150.0), &a), -30.0);
}

#[test]
fn folds_partition_the_data() {
    let folds = kfold_split(103, 5, 4).unwrap();
    let mut seen = vec![0; 103];
    for f in &folds {
        for &i in &f.test {
            seen[i] += 1;
        }
        assert_eq!(f.train.len() + f.test.len(), 103);
    }
    assert!(seen.iter().all(|&c| c == 1));
}

#[test]
fn lognormal_baseline_recovers_trend() {
    let spec = ScenarioSpec {
        bbox: BoundingBox::new(0.0, 0.0, 1000.0, 1000.0).unwrap(),
        sampling: Sampling::Uniform { n: 5000 },
        trend: TrendSpec::omni(Location::new(-100.0, 300.0)),
        alpha: vec![-30.0, 3.1],
        noise_var: 3.0,
        seed: 2,
    };
    let obs = gen_lognormal(&spec).unwrap();
    let fit = fit_lognormal_baseline(&obs, &spec.trend).unwrap();
    assert!((fit.kappa - 3.1).abs() < 0.1);
    assert!((fit.sigma2 - 3.0).abs() < 0.2);
    let pred: Vec<f64> = obs.iter().map(|m| fit.predict(&m.loc)).collect();
    let truth: Vec<f64> = obs.iter().map(|m| m.value).collect();
    assert!((rmse(&pred, &truth).unwrap() - 3f64.sqrt()).abs() < 0.1);
}

#[test]
fn crossval_report_is_deterministic() {
    let spec = ScenarioSpec {
        bbox: BoundingBox::new(0.0, 0.0, 600.0, 600.0).unwrap(),
        sampling: Sampling::Uniform { n: 400 },
        trend: TrendSpec::omni(Location::new(300.0, 300.0)),
        alpha: vec![-40.0, 2.5],
        noise_var: 2.0,
        seed: 3,
    };
    let obs = gen_lognormal(&spec).unwrap();
    let cfg = CvConfig {
        method: CvMethod::Frk { tau: 200.0 },
        k: 4,
        seed: 1,
        trend: spec.trend.clone(),
        em: EmConfig { max_iter: 100, ..EmConfig::default() },
        area: None,
    };
    let a = cross_validate(&obs, &cfg).unwrap();
    let b = cross_validate(&obs, &cfg).unwrap();
    assert_eq!(a.fold_rmses(), b.fold_rmses());
    assert_eq!(a.folds.len(), 4);
    assert_eq!(a.failed_folds, 0);
}

#[test]
fn uncovered_points_count_as_errors() {
    let mut sc = default_multicell_scenario(1);
    sc.sampling = Sampling::Grid { step: 200.0 };
    let data = gen_multicell(&sc).unwrap();
    let one = &sc.cells[0];
    let cells = vec![CellSpec {
        cid: one.cid.clone(),
        antenna: one.antenna.clone(),
        domain: Some(CellDomain { half_angle: 90.0, max_radius: Some(300.0) }),
    }];
    let mut cfg = MulticellFitConfig::new(400.0, TrendKind::Directional);
    cfg.em.max_iter = 50;
    let models = fit_cells(&data.obs, &cells, &sc.bbox, &cfg).unwrap();
    let report = cid_error_report(&data.obs, &models).unwrap();
    assert!(report.uncovered > 0);
    assert!(report.errors >= report.uncovered);
    let far = [Measurement::new(4000.0, 3000.0, -90.0).with_cid("1")];
    assert_eq!(cid_error_report(&far, &models).unwrap().error_rate, 1.0);
}
