//! A common prediction interface and the reference predictors used in
//! evaluation.

use crate::baselines::DiscreteTimeModel;
use crate::data::Dataset;
use crate::datagen::{weibull_survival, WeibullParams};
use crate::ebm::{EnergyModel, IntegrationSpec};
use crate::io::SavedModel;
use crate::{Error, Result};

/// Anything that predicts a survival curve from covariates.
pub trait SurvivalModel {
    /// Required covariate length; `None` when covariates are ignored.
    fn covariate_dim(&self) -> Option<usize>;

    fn survival_curve(&self, x: &[f64], times: &[f64]) -> Result<Vec<f64>>;

    fn survival(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.survival_curve(x, &[t])?[0])
    }
}

/// An energy model paired with the integration rule used for prediction.
#[derive(Debug, Clone, Copy)]
pub struct EbmPredictor<'a> {
    pub model: &'a EnergyModel,
    pub integration: IntegrationSpec,
}

impl<'a> EbmPredictor<'a> {
    pub fn new(model: &'a EnergyModel, integration: IntegrationSpec) -> Self {
        Self { model, integration }
    }
}

impl SurvivalModel for EbmPredictor<'_> {
    fn covariate_dim(&self) -> Option<usize> {
        Some(self.model.covariate_dim())
    }

    fn survival_curve(&self, x: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        self.model.survival_curve(x, times, self.integration)
    }
}

impl SurvivalModel for DiscreteTimeModel {
    fn covariate_dim(&self) -> Option<usize> {
        Some(DiscreteTimeModel::covariate_dim(self))
    }

    fn survival_curve(&self, x: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        DiscreteTimeModel::survival_curve(self, x, times)
    }
}

impl SavedModel {
    /// Prediction view; `integration` only affects energy models.
    pub fn predictor(&self, integration: IntegrationSpec) -> Box<dyn SurvivalModel + '_> {
        match self {
            SavedModel::Ebm(m) => Box::new(EbmPredictor::new(m, integration)),
            SavedModel::Baseline(m) => Box::new(m.clone()),
        }
    }
}

/// Ground truth for the Weibull protocol: covariates are `[λ, k]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeibullOracle;

impl SurvivalModel for WeibullOracle {
    fn covariate_dim(&self) -> Option<usize> {
        Some(2)
    }

    fn survival_curve(&self, x: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        if x.len() != 2 {
            return Err(Error::DimensionMismatch {
                what: "oracle covariates",
                expected: 2,
                found: x.len(),
            });
        }
        let params = WeibullParams::new(x[0], x[1])?;
        Ok(times.iter().map(|&t| weibull_survival(t, params)).collect())
    }
}

/// The same survival probability at every time.
#[derive(Debug, Clone, Copy)]
pub struct ConstantSurvival(pub f64);

impl SurvivalModel for ConstantSurvival {
    fn covariate_dim(&self) -> Option<usize> {
        None
    }

    fn survival_curve(&self, _x: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![self.0; times.len()])
    }
}

/// Covariate-blind Kaplan–Meier estimate of the marginal survival function.
#[derive(Debug, Clone, PartialEq)]
pub struct KaplanMeier {
    /// Distinct failure times, ascending.
    pub times: Vec<f64>,
    /// Survival right after each failure time.
    pub survival: Vec<f64>,
}

impl KaplanMeier {
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("Kaplan-Meier input"));
        }
        let mut obs: Vec<(f64, bool)> = dataset.records.iter().map(|r| (r.time, r.event)).collect();
        obs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut at_risk = obs.len();
        let mut s = 1.0;
        let mut times = Vec::new();
        let mut survival = Vec::new();
        let mut i = 0;
        while i < obs.len() {
            let t = obs[i].0;
            let mut deaths = 0;
            let mut leaving = 0;
            while i < obs.len() && obs[i].0 == t {
                deaths += usize::from(obs[i].1);
                leaving += 1;
                i += 1;
            }
            if deaths > 0 {
                s *= 1.0 - deaths as f64 / at_risk as f64;
                times.push(t);
                survival.push(s);
            }
            at_risk -= leaving;
        }
        Ok(Self { times, survival })
    }

    pub fn at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&u| u <= t) {
            0 => 1.0,
            n => self.survival[n - 1],
        }
    }
}

impl SurvivalModel for KaplanMeier {
    fn covariate_dim(&self) -> Option<usize> {
        None
    }

    fn survival_curve(&self, _x: &[f64], times: &[f64]) -> Result<Vec<f64>> {
        Ok(times.iter().map(|&t| self.at(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurvivalRecord;

    #[test]
    fn kaplan_meier_textbook_example() {
        // times 1,2+,3,3,4+ : S(1)=4/5, S(3)=4/5 · (1 − 2/3) = 4/15
        let recs = [(1.0, true), (2.0, false), (3.0, true), (3.0, true), (4.0, false)]
            .iter()
            .enumerate()
            .map(|(i, &(t, e))| SurvivalRecord::new(i as u64, vec![], t, e).unwrap())
            .collect();
        let km = KaplanMeier::fit(&Dataset::new(recs).unwrap()).unwrap();
        assert_eq!(km.at(0.5), 1.0);
        assert!((km.at(1.0) - 0.8).abs() < 1e-15);
        assert!((km.at(2.5) - 0.8).abs() < 1e-15);
        assert!((km.at(3.0) - 4.0 / 15.0).abs() < 1e-15);
        assert!((km.at(10.0) - 4.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_matches_closed_form() {
        let s = WeibullOracle.survival(2.0, &[2.0, 1.0]).unwrap();
        assert!((s - (-1.0f64).exp()).abs() < 1e-15);
        assert!(WeibullOracle.survival(1.0, &[1.0]).is_err());
    }
}
