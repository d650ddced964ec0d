//! Energy-based survival model.
//!
//! The network output `E(t, x)` defines an unnormalized failure density
//! `exp(−E(t, x))`. The normalizing integral over `[0, ∞)` is split at the
//! last recorded time `t_m`:
//!
//! - `[0, t_m]` is integrated numerically, by uniform Monte Carlo during
//!   training and by the trapezoidal rule at prediction time;
//! - the tail beyond `t_m` is a single lump `(γ − 1) t_m · exp(−E(γ t_m, x))`,
//!   which makes the survival function fall linearly to zero on `[t_m, γ t_m]`.
//!
//! Every normalizer is handled in the log domain through log-sum-exp.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormalizationStats, SurvivalRecord};
use crate::nn::{forward_batch, Gradients, MlpConfig, ParameterSet, Tape, Term, Var};
use crate::training::{fit, TrainConfig, TrainHistory};
use crate::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 1.2;

/// Numerical rule for the integral over `[t, t_m]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum IntegrationSpec {
    /// Equidistant `points` on `[0, t_m]`, both endpoints included.
    Trapezoid { points: usize },
    /// Uniform samples; the stream is derived from `seed` and the covariates.
    MonteCarlo { samples: usize, seed: u64 },
}

impl IntegrationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            IntegrationSpec::Trapezoid { points } if points < 2 => Err(Error::InvalidConfig(
                "trapezoid integration needs at least 2 points".into(),
            )),
            IntegrationSpec::MonteCarlo { samples: 0, .. } => Err(Error::InvalidConfig(
                "Monte Carlo integration needs at least 1 sample".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Integration nodes with log-weights for `∫_a^{t_m} exp(−E(τ)) dτ`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl Quadrature {
    /// `n` independent uniform draws on `[a, t_m]`, each weighted `(t_m − a) / n`.
    ///
    /// Empty when `a ≥ t_m`.
    pub fn monte_carlo<R: Rng + ?Sized>(a: f64, t_m: f64, n: usize, rng: &mut R) -> Self {
        if a >= t_m || n == 0 {
            return Self::default();
        }
        let width = t_m - a;
        let log_w = (width / n as f64).ln();
        let nodes = (0..n).map(|_| a + width * rng.random::<f64>()).collect();
        Self {
            nodes,
            log_weights: vec![log_w; n],
        }
    }

    /// Trapezoidal rule on `n` equidistant points spanning `[a, t_m]`.
    pub fn trapezoid(a: f64, t_m: f64, n: usize) -> Self {
        if a >= t_m || n < 2 {
            return Self::default();
        }
        let h = (t_m - a) / (n - 1) as f64;
        let nodes = (0..n)
            .map(|i| if i + 1 == n { t_m } else { a + (t_m - a) * i as f64 / (n - 1) as f64 })
            .collect();
        let log_weights = (0..n)
            .map(|i| {
                if i == 0 || i + 1 == n {
                    (0.5 * h).ln()
                } else {
                    h.ln()
                }
            })
            .collect();
        Self { nodes, log_weights }
    }

    /// Exact integral over `[a, t_m]` of the piecewise-linear interpolant of
    /// the integrand on the `n`-point grid spanning `[0, t_m]`.
    ///
    /// Coincides with [`Quadrature::trapezoid`] when `a` is a grid node, and
    /// is non-increasing in `a` for any integrand.
    pub fn grid_interpolant(a: f64, t_m: f64, n: usize) -> Self {
        if a >= t_m || n < 2 {
            return Self::default();
        }
        let (panel, frac) = grid_panel(a, t_m, n);
        let h = t_m / (n - 1) as f64;
        let mut weights = vec![0.0; n];
        let rest = 1.0 - frac;
        weights[panel] += 0.5 * h * rest * rest;
        weights[panel + 1] += 0.5 * h * rest * (1.0 + frac);
        for j in panel + 1..n - 1 {
            weights[j] += 0.5 * h;
            weights[j + 1] += 0.5 * h;
        }
        let mut q = Self::default();
        for (i, w) in weights.into_iter().enumerate() {
            if w > 0.0 {
                q.nodes.push(grid_node(i, t_m, n));
                q.log_weights.push(w.ln());
            }
        }
        q
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn grid_node(i: usize, t_m: f64, n: usize) -> f64 {
    if i + 1 == n {
        t_m
    } else {
        t_m * i as f64 / (n - 1) as f64
    }
}

/// Panel index `i` with `g_i ≤ t ≤ g_{i+1}` and the fraction `(t − g_i) / h`.
fn grid_panel(t: f64, t_m: f64, n: usize) -> (usize, f64) {
    let h = t_m / (n - 1) as f64;
    let panel = ((t / h).floor() as usize).min(n - 2);
    let frac = ((t - grid_node(panel, t_m, n)) / h).clamp(0.0, 1.0);
    (panel, frac)
}

/// Integration nodes for one record's likelihood terms.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordQuadrature {
    /// For `Z⁰(0, x)`.
    pub full: Quadrature,
    /// For `Z⁰(τ, x)`; present for censored records only.
    pub from_time: Option<Quadrature>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn covariate_seed(seed: u64, x: &[f64]) -> u64 {
    // splitmix64 over the covariate bits
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in x {
        h ^= v.to_bits();
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Network plus the time constants defining every integral.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    /// `input_dim = covariate_dim + 1`, `output_dim = 1`.
    pub cfg: MlpConfig,
    pub params: ParameterSet,
    /// Largest recorded time in the training data.
    pub t_m: f64,
    pub gamma: f64,
    /// The network sees `t / time_scale`.
    pub time_scale: f64,
    /// Applied to raw covariates before they enter the network.
    pub normalization: Option<NormalizationStats>,
}

impl EnergyModel {
    pub fn new(
        cfg: MlpConfig,
        params: ParameterSet,
        t_m: f64,
        gamma: f64,
        time_scale: f64,
        normalization: Option<NormalizationStats>,
    ) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        if cfg.output_dim != 1 {
            return Err(Error::InvalidConfig("energy network must have one output".into()));
        }
        if !(t_m > 0.0 && t_m.is_finite()) {
            return Err(Error::InvalidConfig(format!("t_m = {t_m} must be positive")));
        }
        if !(gamma > 1.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma = {gamma} must exceed 1")));
        }
        if !(time_scale > 0.0 && time_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "time scale {time_scale} must be positive"
            )));
        }
        if let Some(stats) = &normalization {
            if stats.dim() != cfg.input_dim - 1 {
                return Err(Error::DimensionMismatch {
                    what: "normalization stats",
                    expected: cfg.input_dim - 1,
                    found: stats.dim(),
                });
            }
        }
        Ok(Self {
            cfg,
            params,
            t_m,
            gamma,
            time_scale,
            normalization,
        })
    }

    /// Freshly initialized model sized for `train`.
    ///
    /// `t_m` and the time scale are the largest recorded time; covariates are
    /// min-max normalized with the training ranges.
    pub fn for_dataset(
        train: &Dataset,
        hidden_layers: usize,
        nodes_per_layer: usize,
        dropout_rate: f64,
        gamma: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = train
            .covariate_dim()
            .ok_or(Error::EmptyDataset("training split"))?;
        let t_m = train.max_time().unwrap_or(0.0);
        let cfg = MlpConfig::new(d + 1, hidden_layers, nodes_per_layer, 1, dropout_rate)?;
        let params = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let stats = crate::io::fit_normalization(train)?;
        Self::new(cfg, params, t_m, gamma, t_m, Some(stats))
    }

    pub fn covariate_dim(&self) -> usize {
        self.cfg.input_dim - 1
    }

    /// Upper end of the support, `γ · t_m`.
    pub fn support_end(&self) -> f64 {
        self.gamma * self.t_m
    }

    pub fn with_params(&self, params: ParameterSet) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    fn prepared_covariates(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.covariate_dim() {
            return Err(Error::DimensionMismatch {
                what: "covariates",
                expected: self.covariate_dim(),
                found: x.len(),
            });
        }
        Ok(match &self.normalization {
            Some(stats) => stats.apply(x),
            None => x.to_vec(),
        })
    }

    fn input_rows(&self, prepared: &[f64], times: &[f64]) -> Array2<f64> {
        let d = prepared.len();
        let mut rows = Array2::zeros((times.len(), d + 1));
        for (mut row, &t) in rows.rows_mut().into_iter().zip(times) {
            row[0] = t / self.time_scale;
            for (slot, &v) in row.iter_mut().skip(1).zip(prepared) {
                *slot = v;
            }
        }
        rows
    }

    fn energies_prepared(&self, prepared: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        let rows = self.input_rows(prepared, times);
        let out = forward_batch(&self.params, &self.cfg, rows.view())?;
        let energies: Vec<f64> = out.column(0).to_vec();
        if energies.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite { primitive: "energy" });
        }
        Ok(energies)
    }

    /// Network energies at several times for one covariate vector.
    pub fn energies(&self, x: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        let prepared = self.prepared_covariates(x)?;
        self.energies_prepared(&prepared, times)
    }

    /// `E(t, x)`, evaluated without dropout.
    pub fn energy(&self, t: f64, x: &[f64]) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!("time {t} must be non-negative")));
        }
        Ok(self.energies(x, &[t])?[0])
    }

    fn log_tail_weight(&self) -> f64 {
        ((self.gamma - 1.0) * self.t_m).ln()
    }

    /// `log Z^m(x)`.
    pub fn log_tail_mass(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_tail_weight() - self.energy(self.support_end(), x)?)
    }

    /// Tail lump `(γ − 1) t_m · exp(−E(γ t_m, x))`.
    pub fn tail_mass(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_tail_mass(x)?.exp())
    }

    fn log_quadrature_mass(&self, prepared: &[f64], quad: &Quadrature) -> Result<f64> {
        if quad.is_empty() {
            return Ok(f64::NEG_INFINITY);
        }
        let energies = self.energies_prepared(prepared, &quad.nodes)?;
        Ok(log_sum_exp(
            energies
                .iter()
                .zip(&quad.log_weights)
                .map(|(e, lw)| lw - e),
        ))
    }

    /// Log of the Monte Carlo estimate of `∫_t^{t_m} exp(−E(τ, x)) dτ`.
    pub fn mc_log_partial_mass<R: Rng + ?Sized>(
        &self,
        t: f64,
        x: &[f64],
        n_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!("time {t} must be non-negative")));
        }
        if n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        let prepared = self.prepared_covariates(x)?;
        let quad = Quadrature::monte_carlo(t, self.t_m, n_samples, rng);
        self.log_quadrature_mass(&prepared, &quad)
    }

    /// Unbiased Monte Carlo estimate of `∫_t^{t_m} exp(−E(τ, x)) dτ`; zero for `t ≥ t_m`.
    pub fn mc_partial_mass<R: Rng + ?Sized>(
        &self,
        t: f64,
        x: &[f64],
        n_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        Ok(self.mc_log_partial_mass(t, x, n_samples, rng)?.exp())
    }

    /// Trapezoidal estimate of `∫_t^{t_m} exp(−E(τ, x)) dτ` on `n_points`
    /// equidistant points spanning `[t, t_m]`.
    pub fn trapezoid_partial_mass(&self, t: f64, x: &[f64], n_points: usize) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!("time {t} must be non-negative")));
        }
        if t > self.t_m {
            return Err(Error::OutOfSupport { t, limit: self.t_m });
        }
        if n_points < 2 {
            return Err(Error::InvalidConfig(
                "trapezoid integration needs at least 2 points".into(),
            ));
        }
        if t == self.t_m {
            return Ok(0.0);
        }
        let prepared = self.prepared_covariates(x)?;
        let quad = Quadrature::trapezoid(t, self.t_m, n_points);
        let energies = self.energies_prepared(&prepared, &quad.nodes)?;
        Ok(energies
            .iter()
            .zip(&quad.log_weights)
            .map(|(e, lw)| (lw - e).exp())
            .sum())
    }

    /// `log Z(x) = log(Z⁰(0, x) + Z^m(x))`.
    pub fn log_normalizer(&self, x: &[f64], integration: IntegrationSpec) -> Result<f64> {
        integration.validate()?;
        let prepared = self.prepared_covariates(x)?;
        let quad = match integration {
            IntegrationSpec::Trapezoid { points } => Quadrature::trapezoid(0.0, self.t_m, points),
            IntegrationSpec::MonteCarlo { samples, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(covariate_seed(seed, x));
                Quadrature::monte_carlo(0.0, self.t_m, samples, &mut rng)
            }
        };
        let mut nodes = quad.nodes;
        nodes.push(self.support_end());
        let energies = self.energies_prepared(&prepared, &nodes)?;
        let tail = self.log_tail_weight() - energies[energies.len() - 1];
        Ok(log_sum_exp(
            energies[..energies.len() - 1]
                .iter()
                .zip(&quad.log_weights)
                .map(|(e, lw)| lw - e)
                .chain(std::iter::once(tail)),
        ))
    }

    /// Survival probabilities at `times` for one covariate vector.
    ///
    /// Within `[0, t_m]` the partial integrals come from one set of
    /// integrand values shared by every requested time, so `S(0) = 1` holds
    /// exactly and the curve is non-increasing. Beyond `t_m` it falls
    /// linearly to zero at `γ t_m`.
    pub fn survival_curve(
        &self,
        x: &[f64],
        times: &[f64],
        integration: IntegrationSpec,
    ) -> Result<Vec<f64>> {
        integration.validate()?;
        if let Some(&bad) = times.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::InvalidInput(format!("time {bad} must be non-negative")));
        }
        let prepared = self.prepared_covariates(x)?;
        let partial: Box<dyn Fn(f64) -> f64>;
        let tail;
        match integration {
            IntegrationSpec::Trapezoid { points } => {
                let mut nodes: Vec<f64> =
                    (0..points).map(|i| grid_node(i, self.t_m, points)).collect();
                nodes.push(self.support_end());
                let energies = self.energies_prepared(&prepared, &nodes)?;
                let log_tail = self.log_tail_weight() - energies[points];
                let shift = energies[..points]
                    .iter()
                    .map(|e| -e)
                    .fold(log_tail, f64::max);
                let f: Vec<f64> = energies[..points].iter().map(|e| (-e - shift).exp()).collect();
                tail = (log_tail - shift).exp();
                let h = self.t_m / (points - 1) as f64;
                let mut suffix = vec![0.0; points];
                for i in (0..points - 1).rev() {
                    suffix[i] = suffix[i + 1] + 0.5 * h * (f[i] + f[i + 1]);
                }
                let t_m = self.t_m;
                partial = Box::new(move |t: f64| {
                    let (i, frac) = grid_panel(t, t_m, points);
                    let ft = f[i] + frac * (f[i + 1] - f[i]);
                    0.5 * h * (1.0 - frac) * (ft + f[i + 1]) + suffix[i + 1]
                });
            }
            IntegrationSpec::MonteCarlo { samples, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(covariate_seed(seed, x));
                let quad = Quadrature::monte_carlo(0.0, self.t_m, samples, &mut rng);
                let mut nodes = quad.nodes.clone();
                nodes.push(self.support_end());
                let energies = self.energies_prepared(&prepared, &nodes)?;
                let log_tail = self.log_tail_weight() - energies[samples];
                let mut terms: Vec<(f64, f64)> = quad
                    .nodes
                    .iter()
                    .zip(&energies[..samples])
                    .zip(&quad.log_weights)
                    .map(|((&u, e), lw)| (u, lw - e))
                    .collect();
                let shift = terms.iter().map(|p| p.1).fold(log_tail, f64::max);
                tail = (log_tail - shift).exp();
                // descending nodes; cumulative[j] sums every node ≥ nodes[j]
                terms.sort_by(|a, b| b.0.total_cmp(&a.0));
                let nodes_desc: Vec<f64> = terms.iter().map(|p| p.0).collect();
                let mut cumulative = Vec::with_capacity(samples);
                let mut acc = 0.0;
                for (_, lw) in &terms {
                    acc += (lw - shift).exp();
                    cumulative.push(acc);
                }
                partial = Box::new(move |t: f64| {
                    let count = nodes_desc.partition_point(|&u| u >= t);
                    if count == 0 {
                        0.0
                    } else {
                        cumulative[count - 1]
                    }
                });
            }
        }

        let total = partial(0.0) + tail;
        let at_t_m = tail / total;
        let end = self.support_end();
        let mut out: Vec<f64> = times
            .iter()
            .map(|&t| {
                if t <= self.t_m {
                    ((partial(t) + tail) / total).clamp(0.0, 1.0)
                } else if t < end {
                    at_t_m * (end - t) / (end - self.t_m)
                } else {
                    0.0
                }
            })
            .collect();

        // Rounding guard: the exact curve is monotone, keep the computed one so.
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let mut running = 1.0f64;
        for idx in order {
            running = running.min(out[idx]);
            out[idx] = running;
        }
        Ok(out)
    }

    /// `S(t, x)`.
    pub fn survival(&self, t: f64, x: &[f64], integration: IntegrationSpec) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!("time {t} must be non-negative")));
        }
        Ok(self.survival_curve(x, &[t], integration)?[0])
    }

    /// `f(t, x) = exp(−E(t, x)) / Z(x)` on `[0, t_m]`.
    pub fn density(&self, t: f64, x: &[f64], integration: IntegrationSpec) -> Result<f64> {
        if t > self.t_m {
            return Err(Error::OutOfSupport { t, limit: self.t_m });
        }
        let e = self.energy(t, x)?;
        Ok((-e - self.log_normalizer(x, integration)?).exp())
    }

    fn check_records(&self, batch: &[&SurvivalRecord]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("likelihood batch"));
        }
        for r in batch {
            if r.time > self.t_m {
                return Err(Error::OutOfSupport {
                    t: r.time,
                    limit: self.t_m,
                });
            }
            if r.covariates.len() != self.covariate_dim() {
                return Err(Error::DimensionMismatch {
                    what: "covariates",
                    expected: self.covariate_dim(),
                    found: r.covariates.len(),
                });
            }
        }
        Ok(())
    }

    /// Fresh uniform nodes for every integral in the batch likelihood.
    ///
    /// `Z⁰(0, x)` and `Z⁰(τ, x)` get independent draws.
    pub fn draw_quadrature<R: Rng + ?Sized>(
        &self,
        batch: &[&SurvivalRecord],
        n_samples: usize,
        rng: &mut R,
    ) -> Vec<RecordQuadrature> {
        batch
            .iter()
            .map(|r| {
                let full = Quadrature::monte_carlo(0.0, self.t_m, n_samples, rng);
                let from_time = (!r.event)
                    .then(|| Quadrature::monte_carlo(r.time, self.t_m, n_samples, rng));
                RecordQuadrature { full, from_time }
            })
            .collect()
    }

    /// Deterministic nodes: interpolated trapezoid grid with `points` nodes.
    pub fn grid_quadrature(&self, batch: &[&SurvivalRecord], points: usize) -> Vec<RecordQuadrature> {
        batch
            .iter()
            .map(|r| RecordQuadrature {
                full: Quadrature::grid_interpolant(0.0, self.t_m, points),
                from_time: (!r.event)
                    .then(|| Quadrature::grid_interpolant(r.time, self.t_m, points)),
            })
            .collect()
    }

    /// Records the summed negative log-likelihood of `batch` on `tape`.
    ///
    /// Failures contribute `E(τ, x) + log Z(x)`; censored records contribute
    /// `log Z(x) − log Z(τ, x)`. Integration nodes are constants.
    fn record_nll<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&SurvivalRecord],
        quads: &[RecordQuadrature],
        dropout: Option<&mut R>,
    ) -> Result<Var> {
        let width = self.cfg.input_dim;
        let mut rows: Vec<f64> = Vec::new();
        let mut n_rows = 0usize;
        let mut push_row = |rows: &mut Vec<f64>, t: f64, prepared: &[f64]| {
            rows.push(t / self.time_scale);
            rows.extend_from_slice(prepared);
            n_rows += 1;
            n_rows - 1
        };
        let log_tail = self.log_tail_weight();
        let mut energy_terms = Vec::new();
        let mut groups: Vec<Vec<Term>> = Vec::new();
        let mut group_signs = Vec::new();

        for (r, q) in batch.iter().zip(quads) {
            let prepared = self.prepared_covariates(&r.covariates)?;
            if r.event {
                let row = push_row(&mut rows, r.time, &prepared);
                energy_terms.push(Term::new(row, 0, 1.0));
            }
            let tail_row = push_row(&mut rows, self.support_end(), &prepared);
            let mut add_group = |rows: &mut Vec<f64>, quad: &Quadrature, sign: f64| {
                let mut terms: Vec<Term> = quad
                    .nodes
                    .iter()
                    .zip(&quad.log_weights)
                    .map(|(&u, &lw)| Term::new(push_row(rows, u, &prepared), 0, lw))
                    .collect();
                terms.push(Term::new(tail_row, 0, log_tail));
                groups.push(terms);
                group_signs.push(sign);
            };
            add_group(&mut rows, &q.full, 1.0);
            if let Some(from) = &q.from_time {
                add_group(&mut rows, from, -1.0);
            }
        }

        let inputs = Array2::from_shape_vec((n_rows, width), rows).expect("row-major inputs");
        let x = tape.constant(inputs)?;
        let energies = tape.mlp(&self.cfg, x, dropout)?;
        let log_z = tape.log_sum_exp(energies, -1.0, groups)?;
        let z_terms = group_signs
            .iter()
            .enumerate()
            .map(|(g, &s)| Term::new(g, 0, s))
            .collect();
        let z_part = tape.select(log_z, z_terms)?;
        let e_part = tape.select(energies, energy_terms)?;
        tape.add(e_part, z_part)
    }

    /// Summed NLL and its gradient for given integration nodes.
    ///
    /// `params` replaces the model's own parameters; `dropout` enables
    /// training-mode masks.
    pub fn nll_gradients<R: Rng + ?Sized>(
        &self,
        params: &ParameterSet,
        batch: &[&SurvivalRecord],
        quads: &[RecordQuadrature],
        dropout: Option<&mut R>,
    ) -> Result<(f64, Gradients)> {
        self.check_records(batch)?;
        let mut tape = Tape::new(params);
        let out = self.record_nll(&mut tape, batch, quads, dropout)?;
        tape.gradients(out)
    }

    /// Summed NLL for given integration nodes, without dropout.
    pub fn nll_with_quadrature(
        &self,
        batch: &[&SurvivalRecord],
        quads: &[RecordQuadrature],
    ) -> Result<f64> {
        self.check_records(batch)?;
        let mut tape = Tape::new(&self.params);
        let out = self.record_nll::<ChaCha8Rng>(&mut tape, batch, quads, None)?;
        Ok(tape.scalar(out))
    }

    /// Summed Monte Carlo NLL with fresh uniform nodes from `rng`.
    pub fn nll<R: Rng + ?Sized>(
        &self,
        batch: &[&SurvivalRecord],
        n_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
        }
        self.check_records(batch)?;
        let quads = self.draw_quadrature(batch, n_samples, rng);
        self.nll_with_quadrature(batch, &quads)
    }

    /// Summed NLL with trapezoid integration on `points` grid nodes.
    pub fn nll_trapezoid(&self, batch: &[&SurvivalRecord], points: usize) -> Result<f64> {
        if points < 2 {
            return Err(Error::InvalidConfig(
                "trapezoid integration needs at least 2 points".into(),
            ));
        }
        self.check_records(batch)?;
        let quads = self.grid_quadrature(batch, points);
        self.nll_with_quadrature(batch, &quads)
    }
}

/// Copy of `dataset` where records beyond `t_m` are censored at `t_m`.
///
/// The model carries no shape information past `t_m`, only that the
/// failure happens later.
pub fn censor_beyond(dataset: &Dataset, t_m: f64) -> Dataset {
    Dataset {
        records: dataset
            .records
            .iter()
            .map(|r| {
                if r.time > t_m {
                    SurvivalRecord {
                        time: t_m,
                        event: false,
                        ..r.clone()
                    }
                } else {
                    r.clone()
                }
            })
            .collect(),
    }
}

/// Mini-batch Adam on the Monte Carlo NLL with early stopping on the
/// trapezoid validation NLL. Losses in the history are per-record means.
pub fn train(
    train_set: &Dataset,
    val_set: &Dataset,
    init: EnergyModel,
    cfg: &TrainConfig,
) -> Result<(EnergyModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training split"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation split"));
    }
    let train_refs: Vec<&SurvivalRecord> = train_set.records.iter().collect();
    init.check_records(&train_refs)?;
    let val = censor_beyond(val_set, init.t_m);
    let val_refs: Vec<&SurvivalRecord> = val.records.iter().collect();
    init.check_records(&val_refs)?;
    let val_quads = init.grid_quadrature(&val_refs, cfg.validation_points);
    let dropout = init.cfg.dropout_rate > 0.0;

    let (params, history) = fit(
        init.params.clone(),
        train_refs.len(),
        cfg,
        |p, idx, rng| {
            let batch: Vec<&SurvivalRecord> = idx.iter().map(|&i| train_refs[i]).collect();
            let quads = init.draw_quadrature(&batch, cfg.n_samples, rng);
            let (loss, mut grads) =
                init.nll_gradients(p, &batch, &quads, dropout.then_some(&mut *rng))?;
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            Ok((loss * scale, grads))
        },
        |p| {
            let mut tape = Tape::new(p);
            let out = init.record_nll::<ChaCha8Rng>(&mut tape, &val_refs, &val_quads, None)?;
            Ok(tape.scalar(out) / val_refs.len() as f64)
        },
    )?;
    Ok((init.with_params(params), history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradient_check;

    /// Zero-weight network: `E ≡ 0`.
    fn constant_model(t_m: f64, gamma: f64) -> EnergyModel {
        let cfg = MlpConfig::new(2, 2, 4, 1, 0.0).unwrap();
        EnergyModel::new(cfg, ParameterSet::zeros(&cfg), t_m, gamma, t_m, None).unwrap()
    }

    /// `E(τ, x) = τ` through the ReLU chain (τ ≥ 0 so the clamp is inactive).
    fn linear_model() -> EnergyModel {
        let cfg = MlpConfig::new(2, 2, 3, 1, 0.0).unwrap();
        let mut params = ParameterSet::zeros(&cfg);
        params.layers[0].weights[[0, 0]] = 1.0;
        params.layers[1].weights[[0, 0]] = 1.0;
        params.layers[2].weights[[0, 0]] = 1.0;
        EnergyModel::new(cfg, params, 1.0, 2.0, 1.0, None).unwrap()
    }

    fn random_model(seed: u64) -> EnergyModel {
        let cfg = MlpConfig::new(3, 2, 8, 1, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::init(&cfg, &mut rng);
        for b in params.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
            *b = rng.random_range(-0.3..0.3);
        }
        EnergyModel::new(cfg, params, 2.5, 1.2, 2.5, None).unwrap()
    }

    const X: [f64; 1] = [0.4];
    const X2: [f64; 2] = [0.4, -0.2];

    #[test]
    fn zero_network_has_zero_energy() {
        let m = constant_model(1.0, 2.0);
        for t in [0.0, 0.3, 1.7] {
            assert_eq!(m.energy(t, &X).unwrap(), 0.0);
        }
    }

    #[test]
    fn energy_matches_hand_rolled_forward() {
        let m = random_model(3);
        let (t, x) = (1.1, [0.5, -0.7]);
        let input = [t / m.time_scale, x[0], x[1]];
        let mut act = input.to_vec();
        for (i, layer) in m.params.layers.iter().enumerate() {
            act = (0..layer.out_dim())
                .map(|o| {
                    let z = layer.bias[o]
                        + (0..layer.in_dim())
                            .map(|k| layer.weights[[o, k]] * act[k])
                            .sum::<f64>();
                    if i + 1 < m.params.layers.len() {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
        }
        assert!((m.energy(t, &x).unwrap() - act[0]).abs() < 1e-12);
    }

    #[test]
    fn tail_mass_closed_forms() {
        assert_eq!(constant_model(1.0, 2.0).tail_mass(&X).unwrap(), 1.0);
        assert!((constant_model(3.0, 1.5).tail_mass(&X).unwrap() - 1.5).abs() < 1e-15);
        let m = random_model(5);
        let e = m.energy(m.support_end(), &X2).unwrap();
        let want = (m.gamma - 1.0) * m.t_m * (-e).exp();
        assert!((m.tail_mass(&X2).unwrap() - want).abs() < 1e-14 * want);
    }

    #[test]
    fn monte_carlo_mass_constant_integrand_is_exact() {
        let m = constant_model(1.0, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1, 3, 50] {
            let v = m.mc_partial_mass(0.0, &X, n, &mut rng).unwrap();
            assert!((v - 1.0).abs() < 1e-14, "{v}");
        }
        assert_eq!(m.mc_partial_mass(1.0, &X, 10, &mut rng).unwrap(), 0.0);
    }

    #[test]
    fn monte_carlo_mass_linear_energy() {
        let m = linear_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = m.mc_partial_mass(0.0, &X, 100_000, &mut rng).unwrap();
        let exact = 1.0 - (-1.0f64).exp();
        assert!((v - exact).abs() / exact < 0.01, "{v}");
    }

    #[test]
    fn trapezoid_mass_closed_forms() {
        let m = constant_model(1.0, 2.0);
        for n in [2, 7, 100] {
            assert!((m.trapezoid_partial_mass(0.0, &X, n).unwrap() - 1.0).abs() < 1e-14);
        }
        let lin = linear_model();
        let v = lin.trapezoid_partial_mass(0.0, &X, 200).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-4, "{v}");
        assert!(matches!(
            m.trapezoid_partial_mass(1.5, &X, 10),
            Err(Error::OutOfSupport { .. })
        ));
        assert_eq!(m.trapezoid_partial_mass(1.0, &X, 10).unwrap(), 0.0);
    }

    #[test]
    fn trapezoid_refinement_converges_monotonically() {
        let m = random_model(8);
        let reference = m.trapezoid_partial_mass(0.0, &X2, 20_000).unwrap();
        let gaps: Vec<f64> = [2, 8, 32, 128, 512, 2000]
            .iter()
            .map(|&n| ((m.trapezoid_partial_mass(0.0, &X2, n).unwrap() - reference) / reference).abs())
            .collect();
        for w in gaps.windows(2) {
            assert!(w[1] < w[0], "{gaps:?}");
        }
    }

    #[test]
    fn constant_energy_normalizer_survival_density() {
        let m = constant_model(1.0, 2.0);
        let trap = IntegrationSpec::Trapezoid { points: 20 };
        assert!((m.log_normalizer(&X, trap).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((m.survival(0.5, &X, trap).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(m.survival(0.0, &X, trap).unwrap(), 1.0);
        assert_eq!(m.survival(2.0, &X, trap).unwrap(), 0.0);
        assert!((m.survival(1.5, &X, trap).unwrap() - 0.25).abs() < 1e-12);
        for t in [0.0, 0.25, 1.0] {
            assert!((m.density(t, &X, trap).unwrap() - 0.5).abs() < 1e-12);
        }
        assert!(matches!(m.density(1.2, &X, trap), Err(Error::OutOfSupport { .. })));
        assert!(m.survival(-0.1, &X, trap).is_err());
    }

    #[test]
    fn normalizer_equals_partial_plus_tail() {
        for seed in 0..5 {
            let m = random_model(seed);
            let z = m
                .log_normalizer(&X2, IntegrationSpec::Trapezoid { points: 37 })
                .unwrap()
                .exp();
            let parts = m.trapezoid_partial_mass(0.0, &X2, 37).unwrap() + m.tail_mass(&X2).unwrap();
            assert!(((z - parts) / parts).abs() < 1e-12);
        }
    }

    #[test]
    fn density_integrates_with_tail_to_one() {
        let m = random_model(2);
        let spec = IntegrationSpec::Trapezoid { points: 4001 };
        let log_z = m.log_normalizer(&X2, spec).unwrap();
        let body = m.trapezoid_partial_mass(0.0, &X2, 4001).unwrap();
        let total = (body + m.tail_mass(&X2).unwrap()) / log_z.exp();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(m.density(1.0, &X2, spec).unwrap() >= 0.0);
    }

    #[test]
    fn survival_endpoints_and_monotonicity() {
        let m = random_model(4);
        let times: Vec<f64> = (0..200).map(|i| m.support_end() * i as f64 / 199.0).collect();
        for spec in [
            IntegrationSpec::Trapezoid { points: 20 },
            IntegrationSpec::MonteCarlo {
                samples: 50,
                seed: 3,
            },
        ] {
            let s = m.survival_curve(&X2, &times, spec).unwrap();
            assert_eq!(s[0], 1.0);
            assert_eq!(*s.last().unwrap(), 0.0);
            assert!(s.windows(2).all(|w| w[1] <= w[0]));
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn monte_carlo_prediction_is_deterministic_per_seed() {
        let m = random_model(6);
        let spec = IntegrationSpec::MonteCarlo {
            samples: 30,
            seed: 12,
        };
        let a = m.survival_curve(&X2, &[0.3, 1.0, 2.0], spec).unwrap();
        let b = m.survival_curve(&X2, &[0.3, 1.0, 2.0], spec).unwrap();
        assert_eq!(a, b);
    }

    fn record(time: f64, event: bool, x: &[f64]) -> SurvivalRecord {
        SurvivalRecord::new(0, x.to_vec(), time, event).unwrap()
    }

    #[test]
    fn nll_closed_forms() {
        let m = constant_model(1.0, 2.0);
        let failure = record(0.3, true, &X);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = m.nll(&[&failure], 5, &mut rng).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);

        let censored = record(0.0, false, &X);
        let v = m.nll_trapezoid(&[&censored], 20).unwrap();
        assert!(v.abs() < 1e-14, "{v}");

        let beyond = record(1.5, true, &X);
        assert!(matches!(
            m.nll(&[&beyond], 5, &mut rng),
            Err(Error::OutOfSupport { .. })
        ));
        assert!(matches!(m.nll(&[], 5, &mut rng), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn duplicated_batch_doubles_nll() {
        let m = random_model(9);
        let recs = [
            record(0.4, true, &X2),
            record(1.7, false, &X2),
            record(2.5, false, &[0.1, 0.9]),
        ];
        let batch: Vec<&SurvivalRecord> = recs.iter().collect();
        let quads = m.draw_quadrature(&batch, 7, &mut ChaCha8Rng::seed_from_u64(2));
        let single = m.nll_with_quadrature(&batch, &quads).unwrap();
        let doubled_batch: Vec<&SurvivalRecord> = batch.iter().chain(batch.iter()).copied().collect();
        let doubled_quads: Vec<RecordQuadrature> = quads.iter().chain(quads.iter()).cloned().collect();
        let doubled = m.nll_with_quadrature(&doubled_batch, &doubled_quads).unwrap();
        assert!((doubled - 2.0 * single).abs() < 1e-12 * single.abs());
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let m = random_model(10 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<SurvivalRecord> = (0..5)
                .map(|i| {
                    record(
                        rng.random_range(0.0..m.t_m),
                        i % 2 == 0,
                        &[rng.random::<f64>(), rng.random::<f64>()],
                    )
                })
                .collect();
            let batch: Vec<&SurvivalRecord> = recs.iter().collect();
            let quads = m.draw_quadrature(&batch, 6, &mut rng);
            let report = gradient_check(
                &m.params,
                |p| m.nll_gradients::<ChaCha8Rng>(p, &batch, &quads, None),
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{report:?}");
        }
    }

    #[test]
    fn grid_interpolant_matches_plain_trapezoid_at_grid_nodes() {
        let a = Quadrature::grid_interpolant(0.0, 3.0, 11);
        let b = Quadrature::trapezoid(0.0, 3.0, 11);
        assert_eq!(a.nodes, b.nodes);
        for (x, y) in a.log_weights.iter().zip(&b.log_weights) {
            assert!((x - y).abs() < 1e-14);
        }
        // total weight equals interval length for any start
        for start in [0.0, 0.7, 1.2, 2.999] {
            let q = Quadrature::grid_interpolant(start, 3.0, 11);
            let total: f64 = q.log_weights.iter().map(|w| w.exp()).sum();
            assert!((total - (3.0 - start)).abs() < 1e-12);
        }
    }

    #[test]
    fn validation_records_beyond_t_m_are_censored() {
        let ds = Dataset::new(vec![record(0.5, true, &X), record(4.0, true, &X)]).unwrap();
        let c = censor_beyond(&ds, 3.0);
        assert_eq!(c.records[1].time, 3.0);
        assert!(!c.records[1].event);
        assert_eq!(c.records[0], ds.records[0]);
    }
}
