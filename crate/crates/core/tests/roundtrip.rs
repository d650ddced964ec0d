use ebsurv_core::baselines::{BaselineKind, DiscreteTimeModel};
use ebsurv_core::datagen::{gen_fleet_like, gen_sim_dataset, FleetConfig, SimConfig};
use ebsurv_core::ebm::{EnergyModel, IntegrationSpec, DEFAULT_GAMMA};
use ebsurv_core::io::*;
use ebsurv_core::Error;

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_fleet_like(&FleetConfig::new(300, 1)).unwrap();
    let path = dir.path().join("fleet.csv");
    write_dataset_file(&ds, &path).unwrap();
    assert_eq!(read_dataset_file(&path).unwrap(), ds);
}

#[test]
fn saved_models_predict_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_sim_dataset(&SimConfig::new(100, 3)).unwrap();
    let times: Vec<f64> = (0..50).map(|i| i as f64 * 0.05).collect();
    let models = [
        SavedModel::Ebm(EnergyModel::for_dataset(&ds, 2, 16, 0.0, DEFAULT_GAMMA, 1).unwrap()),
        SavedModel::Baseline(DiscreteTimeModel::for_dataset(BaselineKind::Pch, &ds, 6, 2, 8, 0.2, 1).unwrap()),
        SavedModel::Baseline(DiscreteTimeModel::for_dataset(BaselineKind::Pmf, &ds, 6, 2, 8, 0.2, 1).unwrap()),
    ];
    let t_m = ds.max_time().unwrap();
    let times: Vec<f64> = times.into_iter().filter(|&t| t <= t_m).collect();
    for (i, m) in models.iter().enumerate() {
        let path = dir.path().join(format!("m{i}.json"));
        save_model_file(m, &path).unwrap();
        let back = load_model_file(&path).unwrap();
        assert_eq!(back.kind(), m.kind());
        let spec = IntegrationSpec::Trapezoid { points: 20 };
        for r in &ds.records[..10] {
            let a = m.predictor(spec).survival_curve(&r.covariates, &times).unwrap();
            let b = back.predictor(spec).survival_curve(&r.covariates, &times).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn mismatched_covariates_are_rejected() {
    let ds = gen_sim_dataset(&SimConfig::new(50, 3)).unwrap();
    let m = SavedModel::Ebm(EnergyModel::for_dataset(&ds, 2, 4, 0.0, DEFAULT_GAMMA, 1).unwrap());
    let err = m
        .predictor(IntegrationSpec::Trapezoid { points: 5 })
        .survival(0.1, &[1.0, 2.0, 3.0])
        .unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }), "{err}");
}
