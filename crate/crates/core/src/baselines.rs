//! Discrete-time comparison models over an equidistant grid on `[0, t_m]`.
//!
//! - PCH: the network emits one raw value per interval; `softplus` turns it
//!   into a constant hazard on that interval.
//! - PMF: the network emits `n_grid + 1` logits; their softmax is the
//!   probability of failing in each interval, the last entry being the mass
//!   beyond `t_m`. Survival is linearly interpolated between cut points.
//!
//! Both are trained on the right-censored likelihood with the same loop as
//! the energy-based model.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormalizationStats, SurvivalRecord};
use crate::nn::{forward_batch, Gradients, MlpConfig, ParameterSet, Tape, Term, Var};
use crate::training::{fit, TrainConfig, TrainHistory};
use crate::{Error, Result};

/// Equidistant cut points `0 = s_0 < s_1 < … < s_n = t_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteGrid {
    pub n_grid: usize,
    pub t_m: f64,
}

impl DiscreteGrid {
    pub fn new(n_grid: usize, t_m: f64) -> Result<Self> {
        if n_grid == 0 {
            return Err(Error::InvalidConfig("grid needs at least one interval".into()));
        }
        if !(t_m > 0.0 && t_m.is_finite()) {
            return Err(Error::InvalidConfig(format!("t_m = {t_m} must be positive")));
        }
        Ok(Self { n_grid, t_m })
    }

    pub fn width(&self) -> f64 {
        self.t_m / self.n_grid as f64
    }

    pub fn cut(&self, j: usize) -> f64 {
        if j >= self.n_grid {
            self.t_m
        } else {
            self.t_m * j as f64 / self.n_grid as f64
        }
    }

    pub fn cuts(&self) -> Vec<f64> {
        (0..=self.n_grid).map(|j| self.cut(j)).collect()
    }

    /// Interval `k` with `s_k ≤ t < s_{k+1}` (the last interval is closed) and
    /// the elapsed time `t − s_k`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!("time {t} must be non-negative")));
        }
        if t > self.t_m {
            return Err(Error::OutOfSupport { t, limit: self.t_m });
        }
        let mut k = ((t / self.width()).floor() as usize).min(self.n_grid - 1);
        while k + 1 < self.n_grid && t >= self.cut(k + 1) {
            k += 1;
        }
        while k > 0 && t < self.cut(k) {
            k -= 1;
        }
        Ok((k, t - self.cut(k)))
    }
}

/// The kind of discrete-time head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Pch,
    Pmf,
}

impl BaselineKind {
    pub fn output_dim(self, n_grid: usize) -> usize {
        match self {
            BaselineKind::Pch => n_grid,
            BaselineKind::Pmf => n_grid + 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Pch => "pch",
            BaselineKind::Pmf => "pmf",
        }
    }
}

/// Network head over a [`DiscreteGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTimeModel {
    pub kind: BaselineKind,
    pub cfg: MlpConfig,
    pub params: ParameterSet,
    pub grid: DiscreteGrid,
    pub normalization: Option<NormalizationStats>,
}

pub type PchModel = DiscreteTimeModel;
pub type PmfModel = DiscreteTimeModel;

fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl DiscreteTimeModel {
    pub fn new(
        kind: BaselineKind,
        cfg: MlpConfig,
        params: ParameterSet,
        grid: DiscreteGrid,
        normalization: Option<NormalizationStats>,
    ) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(&cfg)?;
        if cfg.output_dim != kind.output_dim(grid.n_grid) {
            return Err(Error::DimensionMismatch {
                what: "discrete-time head outputs",
                expected: kind.output_dim(grid.n_grid),
                found: cfg.output_dim,
            });
        }
        if let Some(stats) = &normalization {
            if stats.dim() != cfg.input_dim {
                return Err(Error::DimensionMismatch {
                    what: "normalization stats",
                    expected: cfg.input_dim,
                    found: stats.dim(),
                });
            }
        }
        Ok(Self {
            kind,
            cfg,
            params,
            grid,
            normalization,
        })
    }

    /// Freshly initialized head whose grid spans the training times.
    pub fn for_dataset(
        kind: BaselineKind,
        train: &Dataset,
        n_grid: usize,
        hidden_layers: usize,
        nodes_per_layer: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = train
            .covariate_dim()
            .ok_or(Error::EmptyDataset("training split"))?;
        let grid = DiscreteGrid::new(n_grid, train.max_time().unwrap_or(0.0))?;
        let cfg = MlpConfig::new(
            d,
            hidden_layers,
            nodes_per_layer,
            kind.output_dim(n_grid),
            dropout_rate,
        )?;
        let params = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let stats = crate::io::fit_normalization(train)?;
        Self::new(kind, cfg, params, grid, Some(stats))
    }

    pub fn covariate_dim(&self) -> usize {
        self.cfg.input_dim
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

    /// Raw network outputs for one covariate vector.
    pub fn raw_outputs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let prepared = self.prepared_covariates(x)?;
        let row = Array2::from_shape_vec((1, prepared.len()), prepared).expect("row vector");
        Ok(forward_batch(&self.params, &self.cfg, row.view())?.row(0).to_vec())
    }

    /// Per-interval hazards (PCH) or per-bin probabilities plus tail mass (PMF).
    pub fn head_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.raw_outputs(x)?;
        Ok(match self.kind {
            BaselineKind::Pch => raw.into_iter().map(softplus).collect(),
            BaselineKind::Pmf => softmax(&raw),
        })
    }

    pub fn survival_curve(&self, x: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        let head = self.head_values(x)?;
        times
            .iter()
            .map(|&t| match self.kind {
                BaselineKind::Pch => pch_survival_from_hazards(&self.grid, &head, t),
                BaselineKind::Pmf => pmf_survival_from_probabilities(&self.grid, &head, t),
            })
            .collect()
    }

    pub fn survival(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.survival_curve(x, &[t])?[0])
    }

    fn check_records(&self, batch: &[&SurvivalRecord]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("likelihood batch"));
        }
        for r in batch {
            if r.time > self.grid.t_m {
                return Err(Error::OutOfSupport {
                    t: r.time,
                    limit: self.grid.t_m,
                });
            }
        }
        Ok(())
    }

    fn record_nll<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &[&SurvivalRecord],
        dropout: Option<&mut R>,
    ) -> Result<Var> {
        let d = self.cfg.input_dim;
        let mut inputs = Vec::with_capacity(batch.len() * d);
        for r in batch {
            inputs.extend(self.prepared_covariates(&r.covariates)?);
        }
        let inputs = Array2::from_shape_vec((batch.len(), d), inputs).expect("row-major inputs");
        let x = tape.constant(inputs)?;
        let raw = tape.mlp(&self.cfg, x, dropout)?;
        let delta = self.grid.width();

        match self.kind {
            BaselineKind::Pch => {
                let hazard = tape.softplus(raw)?;
                let log_hazard = tape.log(hazard)?;
                let mut cumulative = Vec::new();
                let mut failures = Vec::new();
                for (i, r) in batch.iter().enumerate() {
                    let (k, elapsed) = self.grid.locate(r.time)?;
                    for j in 0..k {
                        cumulative.push(Term::new(i, j, delta));
                    }
                    if elapsed > 0.0 {
                        cumulative.push(Term::new(i, k, elapsed));
                    }
                    if r.event {
                        failures.push(Term::new(i, k, -1.0));
                    }
                }
                let h_part = tape.select(hazard, cumulative)?;
                let f_part = tape.select(log_hazard, failures)?;
                tape.add(h_part, f_part)
            }
            BaselineKind::Pmf => {
                let n_out = self.grid.n_grid + 1;
                let normalizers: Vec<Vec<Term>> = (0..batch.len())
                    .map(|i| (0..n_out).map(|j| Term::new(i, j, 0.0)).collect())
                    .collect();
                let mut numerators = Vec::new();
                let mut logit_terms = Vec::new();
                for (i, r) in batch.iter().enumerate() {
                    let (k, elapsed) = self.grid.locate(r.time)?;
                    if r.event {
                        logit_terms.push(Term::new(i, k, -1.0));
                    } else {
                        // S(τ) = (1 − w) p_k + Σ_{j>k} p_j
                        let keep = 1.0 - elapsed / delta;
                        let mut terms = Vec::with_capacity(n_out - k);
                        if keep > 0.0 {
                            terms.push(Term::new(i, k, keep.ln()));
                        }
                        terms.extend((k + 1..n_out).map(|j| Term::new(i, j, 0.0)));
                        numerators.push(terms);
                    }
                }
                let n_censored = numerators.len();
                let log_norm = tape.log_sum_exp(raw, 1.0, normalizers)?;
                let norm_part = tape.select(
                    log_norm,
                    (0..batch.len()).map(|i| Term::new(i, 0, 1.0)).collect(),
                )?;
                let logit_part = tape.select(raw, logit_terms)?;
                let total = tape.add(norm_part, logit_part)?;
                if n_censored == 0 {
                    return Ok(total);
                }
                let log_num = tape.log_sum_exp(raw, 1.0, numerators)?;
                let num_part = tape.select(
                    log_num,
                    (0..n_censored).map(|g| Term::new(g, 0, -1.0)).collect(),
                )?;
                tape.add(total, num_part)
            }
        }
    }

    /// Summed negative log-likelihood and gradient with respect to `params`.
    pub fn nll_gradients<R: Rng + ?Sized>(
        &self,
        params: &ParameterSet,
        batch: &[&SurvivalRecord],
        dropout: Option<&mut R>,
    ) -> Result<(f64, Gradients)> {
        self.check_records(batch)?;
        let mut tape = Tape::new(params);
        let out = self.record_nll(&mut tape, batch, dropout)?;
        tape.gradients(out)
    }

    /// Summed negative log-likelihood, dropout off.
    pub fn nll(&self, batch: &[&SurvivalRecord]) -> Result<f64> {
        self.check_records(batch)?;
        let mut tape = Tape::new(&self.params);
        let out = self.record_nll::<ChaCha8Rng>(&mut tape, batch, None)?;
        Ok(tape.scalar(out))
    }
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `exp(−Σ_{j<k} λ_j Δ − λ_k (t − s_k))`.
pub fn pch_survival_from_hazards(grid: &DiscreteGrid, hazards: &[f64], t: f64) -> Result<f64> {
    let (k, elapsed) = grid.locate(t)?;
    let delta = grid.width();
    let cumulative: f64 = hazards[..k].iter().map(|h| h * delta).sum::<f64>() + hazards[k] * elapsed;
    Ok((-cumulative).exp())
}

/// One minus the mass of the bins already passed, linear within a bin.
pub fn pmf_survival_from_probabilities(
    grid: &DiscreteGrid,
    probabilities: &[f64],
    t: f64,
) -> Result<f64> {
    let (k, elapsed) = grid.locate(t)?;
    let w = elapsed / grid.width();
    let before: f64 = probabilities[..k].iter().sum();
    Ok((1.0 - before - w * probabilities[k]).clamp(0.0, 1.0))
}

/// Trains a PCH or PMF head with early stopping on the validation NLL.
///
/// Validation records beyond the grid end are censored there.
pub fn train_baseline(
    train_set: &Dataset,
    val_set: &Dataset,
    init: DiscreteTimeModel,
    cfg: &TrainConfig,
) -> Result<(DiscreteTimeModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training split"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation split"));
    }
    let train_refs: Vec<&SurvivalRecord> = train_set.records.iter().collect();
    init.check_records(&train_refs)?;
    let val = crate::ebm::censor_beyond(val_set, init.grid.t_m);
    let val_refs: Vec<&SurvivalRecord> = val.records.iter().collect();
    let dropout = init.cfg.dropout_rate > 0.0;

    let (params, history) = fit(
        init.params.clone(),
        train_refs.len(),
        cfg,
        |p, idx, rng| {
            let batch: Vec<&SurvivalRecord> = idx.iter().map(|&i| train_refs[i]).collect();
            let (loss, mut grads) = init.nll_gradients(p, &batch, dropout.then_some(&mut *rng))?;
            let scale = 1.0 / batch.len() as f64;
            grads.scale(scale);
            Ok((loss * scale, grads))
        },
        |p| {
            let mut tape = Tape::new(p);
            let out = init.record_nll::<ChaCha8Rng>(&mut tape, &val_refs, None)?;
            Ok(tape.scalar(out) / val_refs.len() as f64)
        },
    )?;
    Ok((init.with_params(params), history))
}
