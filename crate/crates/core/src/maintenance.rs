//! Replace-or-keep decisions from predicted survival at a horizon.
//!
//! Models are trained on durations measured from the information cutoff
//! `t0`, so the conditional survival over an extra duration is the model's
//! survival function of that duration.

use std::io::Write;

use crate::data::Dataset;
use crate::model::SurvivalModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionConfig {
    /// Information cutoff; durations in the data are measured from it.
    pub t0: f64,
    pub horizon: f64,
    /// Replace when the horizon survival probability falls below this.
    pub threshold: f64,
}

impl DecisionConfig {
    pub fn new(t0: f64, horizon: f64, threshold: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!("horizon {horizon} must be positive")));
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "threshold {threshold} must lie in (0, 1)"
            )));
        }
        if !(t0 >= 0.0 && t0.is_finite()) {
            return Err(Error::InvalidConfig(format!("t0 {t0} must be non-negative")));
        }
        Ok(Self {
            t0,
            horizon,
            threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaintenanceDecision {
    pub id: u64,
    pub conditional_survival: f64,
    pub replace: bool,
}

/// Probability of surviving a further duration `t` past the cutoff.
pub fn conditional_survival(model: &dyn SurvivalModel, t: f64, x: &[f64]) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!("duration {t} must be non-negative")));
    }
    model.survival(t, x)
}

/// Strict threshold rule: ties keep the component.
pub fn should_replace(conditional_survival: f64, threshold: f64) -> bool {
    conditional_survival < threshold
}

pub fn decide(
    model: &dyn SurvivalModel,
    id: u64,
    x: &[f64],
    cfg: &DecisionConfig,
) -> Result<MaintenanceDecision> {
    let s = conditional_survival(model, cfg.horizon, x)?;
    Ok(MaintenanceDecision {
        id,
        conditional_survival: s,
        replace: should_replace(s, cfg.threshold),
    })
}

/// Decisions for every record, ordered by subject id.
pub fn decide_batch(
    model: &dyn SurvivalModel,
    dataset: &Dataset,
    cfg: &DecisionConfig,
) -> Result<Vec<MaintenanceDecision>> {
    let mut out = dataset
        .records
        .iter()
        .map(|r| decide(model, r.id, &r.covariates, cfg))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|d| d.id);
    Ok(out)
}

/// CSV with header `id,cond_survival,replace`.
pub fn write_decisions<W: Write>(decisions: &[MaintenanceDecision], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["id", "cond_survival", "replace"])?;
    for d in decisions {
        w.write_record([
            d.id.to_string(),
            d.conditional_survival.to_string(),
            u8::from(d.replace).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurvivalRecord;
    use crate::ebm::{EnergyModel, IntegrationSpec};
    use crate::model::EbmPredictor;
    use crate::nn::{MlpConfig, ParameterSet};

    fn constant_energy() -> EnergyModel {
        let cfg = MlpConfig::new(2, 1, 2, 1, 0.0).unwrap();
        EnergyModel::new(cfg, ParameterSet::zeros(&cfg), 1.0, 2.0, 1.0, None).unwrap()
    }

    #[test]
    fn closed_form_decisions() {
        let m = constant_energy();
        let p = EbmPredictor::new(&m, IntegrationSpec::Trapezoid { points: 10 });
        let keep = decide(&p, 1, &[0.0], &DecisionConfig::new(0.0, 0.5, 0.7).unwrap()).unwrap();
        assert!((keep.conditional_survival - 0.75).abs() < 1e-12);
        assert!(!keep.replace);
        let replace = decide(&p, 1, &[0.0], &DecisionConfig::new(0.0, 0.5, 0.8).unwrap()).unwrap();
        assert!(replace.replace);
        assert_eq!(conditional_survival(&p, 0.0, &[0.3]).unwrap(), 1.0);
    }

    #[test]
    fn extreme_thresholds() {
        let m = constant_energy();
        let p = EbmPredictor::new(&m, IntegrationSpec::Trapezoid { points: 10 });
        let s = conditional_survival(&p, 0.25, &[0.0]).unwrap();
        assert!(should_replace(s, 1.0));
        assert!(!should_replace(s, 0.0));
        assert!(!should_replace(0.5, 0.5));
        assert!(DecisionConfig::new(0.0, 0.5, 1.0).is_err());
        assert!(DecisionConfig::new(0.0, 0.0, 0.5).is_err());
    }

    #[test]
    fn batch_is_sorted_by_id() {
        let m = constant_energy();
        let p = EbmPredictor::new(&m, IntegrationSpec::Trapezoid { points: 10 });
        let ds = Dataset::new(
            [5u64, 2, 9]
                .iter()
                .map(|&id| SurvivalRecord::new(id, vec![id as f64], 0.5, true).unwrap())
                .collect(),
        )
        .unwrap();
        let d = decide_batch(&p, &ds, &DecisionConfig::new(0.0, 0.3, 0.5).unwrap()).unwrap();
        assert_eq!(d.iter().map(|d| d.id).collect::<Vec<_>>(), vec![2, 5, 9]);
        assert!(decide_batch(&p, &Dataset::default(), &DecisionConfig::new(0.0, 0.3, 0.5).unwrap())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn decisions_csv_layout() {
        let mut buf = Vec::new();
        write_decisions(
            &[MaintenanceDecision {
                id: 3,
                conditional_survival: 0.25,
                replace: true,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "id,cond_survival,replace\n3,0.25,1\n");
    }
}
