//! Synthetic survival data.
//!
//! Two generators are provided: the Weibull protocol with uniformly drawn
//! `(λ, k)` as covariates and uniform censoring, and a fleet-like stand-in
//! with many normalized features whose event times depend on two hidden
//! projections of the first few features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, SurvivalRecord};
use crate::{Error, Result};

/// Two-parameter Weibull distribution with timescale `lambda` and shape `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeibullParams {
    pub lambda: f64,
    pub k: f64,
}

impl WeibullParams {
    pub fn new(lambda: f64, k: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite() && k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "Weibull parameters must be positive, got lambda={lambda}, k={k}"
            )));
        }
        Ok(Self { lambda, k })
    }
}

/// `exp(−(t/λ)^k)`.
pub fn weibull_survival(t: f64, params: WeibullParams) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    (-(t / params.lambda).powf(params.k)).exp()
}

/// `(k/λ)(t/λ)^{k−1} exp(−(t/λ)^k)`.
pub fn weibull_density(t: f64, params: WeibullParams) -> Result<f64> {
    let WeibullParams { lambda, k } = params;
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!("time {t} must be non-negative")));
    }
    if t == 0.0 {
        return if k < 1.0 {
            Err(Error::InvalidInput(
                "Weibull density is singular at t = 0 for k < 1".into(),
            ))
        } else if k == 1.0 {
            Ok(1.0 / lambda)
        } else {
            Ok(0.0)
        };
    }
    let z = t / lambda;
    Ok(k / lambda * z.powf(k - 1.0) * (-z.powf(k)).exp())
}

/// Inverse-CDF transform: `λ (−ln u)^{1/k}` for `u ∈ (0, 1)`.
pub fn weibull_quantile_of_survival(u: f64, params: WeibullParams) -> f64 {
    params.lambda * (-u.ln()).powf(1.0 / params.k)
}

pub fn sample_weibull<R: Rng + ?Sized>(params: WeibullParams, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(rand::distr::Open01);
    weibull_quantile_of_survival(u, params)
}

/// Settings for the Weibull simulation protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n_subjects: usize,
    pub lambda_range: (f64, f64),
    pub k_range: (f64, f64),
    pub censor_range: (f64, f64),
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n_subjects: usize, seed: u64) -> Self {
        Self {
            n_subjects,
            lambda_range: (1.0, 3.0),
            k_range: (0.5, 5.0),
            censor_range: (0.0, 3.0),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidConfig("n_subjects must be at least 1".into()));
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo < hi;
        if !ordered(self.lambda_range) || !ordered(self.k_range) || !ordered(self.censor_range) {
            return Err(Error::InvalidConfig("ranges must be finite and ordered".into()));
        }
        if self.lambda_range.0 <= 0.0 || self.k_range.0 <= 0.0 || self.censor_range.0 < 0.0 {
            return Err(Error::InvalidConfig(
                "Weibull ranges must be positive and censoring non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One simulated subject with its latent event and censoring times.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentSubject {
    pub params: WeibullParams,
    pub event_time: f64,
    pub censor_time: f64,
}

impl LatentSubject {
    /// `τ = min(T, C)`; a tie counts as a failure.
    pub fn record(&self, id: u64, covariates: Vec<f64>) -> SurvivalRecord {
        let event = self.event_time <= self.censor_time;
        SurvivalRecord {
            id,
            covariates,
            time: self.event_time.min(self.censor_time),
            event,
        }
    }
}

/// Latent draws of the Weibull protocol, in subject order.
pub fn gen_sim_latent(cfg: &SimConfig) -> Result<Vec<LatentSubject>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let subjects = (0..cfg.n_subjects)
        .map(|i| {
            let lambda = rng.random_range(cfg.lambda_range.0..cfg.lambda_range.1);
            let k = rng.random_range(cfg.k_range.0..cfg.k_range.1);
            let params = WeibullParams { lambda, k };
            let event_time = sample_weibull(params, &mut rng);
            let censor_time = rng.random_range(cfg.censor_range.0..cfg.censor_range.1);
            log::trace!("subject {i}: lambda={lambda} k={k} T={event_time} C={censor_time}");
            LatentSubject {
                params,
                event_time,
                censor_time,
            }
        })
        .collect();
    Ok(subjects)
}

/// Weibull protocol dataset with covariates `[λ, k]`.
pub fn gen_sim_dataset(cfg: &SimConfig) -> Result<Dataset> {
    let latent = gen_sim_latent(cfg)?;
    Ok(Dataset {
        records: latent
            .iter()
            .enumerate()
            .map(|(i, s)| s.record(i as u64, vec![s.params.lambda, s.params.k]))
            .collect(),
    })
}

/// Settings for the fleet-like generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FleetConfig {
    pub n_subjects: usize,
    pub covariate_dim: usize,
    pub target_censor_rate: f64,
    pub seed: u64,
}

impl FleetConfig {
    pub fn new(n_subjects: usize, seed: u64) -> Self {
        Self {
            n_subjects,
            covariate_dim: 100,
            target_censor_rate: 0.74,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidConfig("n_subjects must be at least 1".into()));
        }
        if self.covariate_dim < FLEET_ACTIVE_FEATURES {
            return Err(Error::InvalidConfig(format!(
                "fleet generator needs at least {FLEET_ACTIVE_FEATURES} features"
            )));
        }
        if !(self.target_censor_rate > 0.0 && self.target_censor_rate < 1.0) {
            return Err(Error::InvalidConfig("censor rate must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Features `0..FLEET_ACTIVE_FEATURES` drive the event time; the rest are noise.
pub const FLEET_ACTIVE_FEATURES: usize = 8;
const FLEET_RATE_TOLERANCE: f64 = 0.01;

/// Standardized sum of a block of uniform features.
fn projection(block: &[f64]) -> f64 {
    let n = block.len() as f64;
    (block.iter().sum::<f64>() - 0.5 * n) / (n / 12.0).sqrt()
}

/// Event-time distribution of a fleet subject; durations are in years.
pub fn fleet_weibull_params(x: &[f64]) -> WeibullParams {
    let half = FLEET_ACTIVE_FEATURES / 2;
    let wear = projection(&x[..half]);
    let usage = projection(&x[half..FLEET_ACTIVE_FEATURES]);
    WeibullParams {
        lambda: 2.0 * (-0.7 * wear).exp(),
        k: 1.3 + 0.5 * usage.tanh(),
    }
}

fn censored_fraction(event_times: &[f64], censor_unit: &[f64], window: f64) -> f64 {
    let censored = event_times
        .iter()
        .zip(censor_unit)
        .filter(|(&t, &u)| window * u < t)
        .count();
    censored as f64 / event_times.len() as f64
}

/// Fleet-like dataset: uniform features, covariate-dependent Weibull event
/// times and uniform censoring on `[0, c]`, with `c` set by bisection so the
/// realized censoring rate matches the target.
pub fn gen_fleet_like(cfg: &FleetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut covariates = Vec::with_capacity(cfg.n_subjects);
    let mut event_times = Vec::with_capacity(cfg.n_subjects);
    let mut censor_unit = Vec::with_capacity(cfg.n_subjects);
    for _ in 0..cfg.n_subjects {
        let x: Vec<f64> = (0..cfg.covariate_dim).map(|_| rng.random::<f64>()).collect();
        event_times.push(sample_weibull(fleet_weibull_params(&x), &mut rng));
        censor_unit.push(rng.random::<f64>());
        covariates.push(x);
    }

    // The censored fraction decreases with the window length.
    let (mut lo, mut hi) = (1e-9, 1.0);
    while censored_fraction(&event_times, &censor_unit, hi) > cfg.target_censor_rate {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if censored_fraction(&event_times, &censor_unit, mid) > cfg.target_censor_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let window = [lo, hi]
        .into_iter()
        .min_by(|a, b| {
            let da = (censored_fraction(&event_times, &censor_unit, *a) - cfg.target_censor_rate).abs();
            let db = (censored_fraction(&event_times, &censor_unit, *b) - cfg.target_censor_rate).abs();
            da.total_cmp(&db)
        })
        .expect("two candidates");
    let realized = censored_fraction(&event_times, &censor_unit, window);
    if (realized - cfg.target_censor_rate).abs() > FLEET_RATE_TOLERANCE {
        return Err(Error::UnreachableTarget(format!(
            "censoring rate {:.4} cannot be hit within {FLEET_RATE_TOLERANCE} with {} subjects (best {realized:.4})",
            cfg.target_censor_rate, cfg.n_subjects
        )));
    }
    log::debug!("fleet censoring window {window:.4} years, realized rate {realized:.4}");

    let records = covariates
        .into_iter()
        .zip(event_times.iter().zip(&censor_unit))
        .enumerate()
        .map(|(i, (x, (&t, &u)))| {
            let c = window * u;
            SurvivalRecord {
                id: i as u64,
                covariates: x,
                time: t.min(c),
                event: t <= c,
            }
        })
        .collect();
    Ok(Dataset { records })
}

/// Shuffles and splits into `(train, validation, test)`.
///
/// Validation and test sizes are `floor(n · fraction)`; training takes the rest.
pub fn split_dataset(
    dataset: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (f_train, f_val, f_test) = fractions;
    let valid = |f: f64| f > 0.0 && f < 1.0;
    if !valid(f_train) || !valid(f_val) || !valid(f_test) {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must each lie in (0, 1)"
        )));
    }
    if (f_train + f_val + f_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let n = dataset.len();
    let n_val = (n as f64 * f_val).floor() as usize;
    let n_test = (n as f64 * f_test).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| Dataset {
        records: idx.iter().map(|&i| dataset.records[i].clone()).collect(),
    };
    let n_train = n - n_val - n_test;
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn survival_closed_forms() {
        let p = WeibullParams::new(2.0, 1.0).unwrap();
        assert_eq!(weibull_survival(0.0, p), 1.0);
        assert!((weibull_survival(2.0, p) - (-1.0f64).exp()).abs() < 1e-15);
        assert!(WeibullParams::new(0.0, 1.0).is_err());
    }

    #[test]
    fn density_edge_cases() {
        let p = WeibullParams::new(1.0, 1.0).unwrap();
        assert_eq!(weibull_density(0.0, p).unwrap(), 1.0);
        let sharp = WeibullParams::new(1.0, 0.7).unwrap();
        assert!(weibull_density(0.0, sharp).is_err());
        assert!(weibull_density(0.1, sharp).unwrap() > 0.0);
    }

    #[test]
    fn density_is_negative_survival_derivative() {
        for (lambda, k) in [(1.0, 0.5), (2.0, 1.0), (1.7, 3.3), (3.0, 5.0)] {
            let p = WeibullParams::new(lambda, k).unwrap();
            for t in [0.2, 0.9, 1.6, 2.8] {
                let h = 1e-5;
                let fd = -(weibull_survival(t + h, p) - weibull_survival(t - h, p)) / (2.0 * h);
                assert!((fd - weibull_density(t, p).unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn inverse_cdf_hand_value() {
        let p = WeibullParams::new(2.0, 1.0).unwrap();
        let t = weibull_quantile_of_survival((-1.0f64).exp(), p);
        assert!((t - 2.0).abs() < 1e-14);
    }

    #[test]
    fn larger_shape_concentrates_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let std = |k: f64, rng: &mut ChaCha8Rng| {
            let p = WeibullParams::new(2.0, k).unwrap();
            let xs: Vec<f64> = (0..20_000).map(|_| sample_weibull(p, rng)).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let s = [1.0, 3.0, 10.0].map(|k| std(k, &mut rng));
        assert!(s[0] > s[1] && s[1] > s[2], "{s:?}");
    }

    #[test]
    fn simulated_dataset_is_deterministic_and_consistent() {
        let cfg = SimConfig::new(500, 9);
        let a = gen_sim_dataset(&cfg).unwrap();
        assert_eq!(a, gen_sim_dataset(&cfg).unwrap());
        let latent = gen_sim_latent(&cfg).unwrap();
        for (r, s) in a.records.iter().zip(&latent) {
            assert_eq!(r.event, s.event_time <= s.censor_time);
            assert_eq!(r.covariates, vec![s.params.lambda, s.params.k]);
            if !r.event {
                assert!(r.time <= 3.0);
            }
            assert!(r.time < 3.0);
        }
    }

    #[test]
    fn tie_counts_as_failure() {
        let s = LatentSubject {
            params: WeibullParams::new(1.0, 1.0).unwrap(),
            event_time: 1.5,
            censor_time: 1.5,
        };
        assert!(s.record(0, vec![]).event);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = gen_sim_dataset(&SimConfig::new(10, 1)).unwrap();
        let (tr, va, te) = split_dataset(&ds, DEFAULT_SPLIT, 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (7, 1, 2));
        let again = split_dataset(&ds, DEFAULT_SPLIT, 3).unwrap();
        assert_eq!((tr.clone(), va.clone(), te.clone()), again);
        let mut ids: Vec<u64> = tr
            .records
            .iter()
            .chain(&va.records)
            .chain(&te.records)
            .map(|r| r.id)
            .collect();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<u64>>());
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let ds = gen_sim_dataset(&SimConfig::new(10, 1)).unwrap();
        assert!(split_dataset(&ds, (0.8, 0.2, 0.0), 0).is_err());
        assert!(split_dataset(&ds, (0.5, 0.2, 0.2), 0).is_err());
        assert!(split_dataset(&ds, (1.2, -0.1, -0.1), 0).is_err());
    }

    #[test]
    fn fleet_features_are_normalized() {
        let ds = gen_fleet_like(&FleetConfig::new(2000, 5)).unwrap();
        assert!((ds.censoring_rate() - 0.74).abs() <= 0.01);
        assert!(ds
            .records
            .iter()
            .flat_map(|r| &r.covariates)
            .all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds.covariate_dim(), Some(100));
    }

    #[test]
    fn fleet_rejects_unreachable_rate() {
        let cfg = FleetConfig {
            n_subjects: 3,
            ..FleetConfig::new(3, 0)
        };
        assert!(matches!(gen_fleet_like(&cfg), Err(Error::UnreachableTarget(_))));
    }
}
