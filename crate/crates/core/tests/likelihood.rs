use ebsurv_core::baselines::*;
use ebsurv_core::data::{Dataset, SurvivalRecord};
use ebsurv_core::ebm::EnergyModel;
use ebsurv_core::nn::{MlpConfig, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_records(rng: &mut ChaCha8Rng, n: usize, t_m: f64) -> Vec<SurvivalRecord> {
    (0..n)
        .map(|i| {
            let t = if i == 0 { t_m } else if i == 1 { 0.0 } else { rng.random_range(0.0..t_m) };
            SurvivalRecord::new(i as u64, vec![rng.random(), rng.random()], t, rng.random_bool(0.5)).unwrap()
        })
        .collect()
}

fn random_head(kind: BaselineKind, n_grid: usize, rng: &mut ChaCha8Rng) -> DiscreteTimeModel {
    let cfg = MlpConfig::new(2, 2, 5, kind.output_dim(n_grid), 0.0).unwrap();
    let mut params = ParameterSet::init(&cfg, rng);
    for b in params.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
        *b = rng.random_range(-0.5..0.5);
    }
    DiscreteTimeModel::new(kind, cfg, params, DiscreteGrid::new(n_grid, 2.0).unwrap(), None).unwrap()
}

/// Per-interval products written out directly.
fn brute_force_nll(model: &DiscreteTimeModel, records: &[SurvivalRecord]) -> f64 {
    let g = model.grid;
    let delta = g.t_m / g.n_grid as f64;
    records
        .iter()
        .map(|r| {
            let head = model.head_values(&r.covariates).unwrap();
            let mut k = 0;
            while k + 1 < g.n_grid && r.time >= (k + 1) as f64 * delta {
                k += 1;
            }
            let elapsed = r.time - k as f64 * delta;
            let likelihood = match model.kind {
                BaselineKind::Pch => {
                    let mut s = 1.0;
                    for h in &head[..k] {
                        s *= (-h * delta).exp();
                    }
                    s *= (-head[k] * elapsed).exp();
                    if r.event { head[k] * s } else { s }
                }
                BaselineKind::Pmf => {
                    if r.event {
                        head[k]
                    } else {
                        let later: f64 = head[k + 1..].iter().sum();
                        later + (1.0 - elapsed / delta) * head[k]
                    }
                }
            };
            -likelihood.ln()
        })
        .sum()
}

#[test]
fn discrete_likelihoods_match_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in [BaselineKind::Pch, BaselineKind::Pmf] {
        for n_grid in 1..=3 {
            for _ in 0..4 {
                let m = random_head(kind, n_grid, &mut rng);
                let recs = random_records(&mut rng, 12, m.grid.t_m);
                let refs: Vec<&SurvivalRecord> = recs.iter().collect();
                let got = m.nll(&refs).unwrap();
                let want = brute_force_nll(&m, &recs);
                assert!((got - want).abs() < 1e-10, "{kind:?} {n_grid}: {got} vs {want}");
            }
        }
    }
}

fn random_energy(seed: u64) -> EnergyModel {
    let cfg = MlpConfig::new(3, 2, 8, 1, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ParameterSet::init(&cfg, &mut rng);
    EnergyModel::new(cfg, params, 2.0, 1.2, 2.0, None).unwrap()
}

#[test]
fn monte_carlo_mass_is_unbiased() {
    let m = random_energy(4);
    let x = [0.3, 0.8];
    for t in [0.0, 0.7] {
        let exact = m.trapezoid_partial_mass(t, &x, 20_001).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let reps = 10_000;
        let draws: Vec<f64> = (0..reps).map(|_| m.mc_partial_mass(t, &x, 5, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / reps as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let se = (var / reps as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }
}

#[test]
fn monte_carlo_spread_shrinks_with_samples() {
    let m = random_energy(6);
    let x = [0.6, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let spread = |n: usize, rng: &mut ChaCha8Rng| {
        let d: Vec<f64> = (0..400).map(|_| m.mc_partial_mass(0.0, &x, n, rng).unwrap()).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt()
    };
    let sds: Vec<f64> = [3, 50, 100, 1000].iter().map(|&n| spread(n, &mut rng)).collect();
    assert!(sds.windows(2).all(|w| w[1] < w[0]), "{sds:?}");
}

#[test]
fn trained_heads_respect_their_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = random_head(BaselineKind::Pmf, 4, &mut rng);
    let p = m.head_values(&[0.2, 0.9]).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let ds = Dataset::new(random_records(&mut rng, 5, 2.0)).unwrap();
    assert!(m.nll(&ds.records.iter().collect::<Vec<_>>()).unwrap().is_finite());
}
