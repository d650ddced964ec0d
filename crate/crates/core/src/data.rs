//! Right-censored survival records and datasets.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One subject: covariates, recorded time and event flag.
///
/// `event == true` marks an observed failure at `time`; otherwise the subject
/// was censored at `time`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalRecord {
    pub id: u64,
    pub covariates: Vec<f64>,
    pub time: f64,
    pub event: bool,
}

impl SurvivalRecord {
    pub fn new(id: u64, covariates: Vec<f64>, time: f64, event: bool) -> Result<Self> {
        if !(time >= 0.0 && time.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "record {id}: time {time} must be finite and non-negative"
            )));
        }
        Ok(Self {
            id,
            covariates,
            time,
            event,
        })
    }
}

/// Records sharing one covariate dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<SurvivalRecord>,
}

impl Dataset {
    pub fn new(records: Vec<SurvivalRecord>) -> Result<Self> {
        if let Some(first) = records.first() {
            let d = first.covariates.len();
            if let Some(bad) = records.iter().find(|r| r.covariates.len() != d) {
                return Err(Error::DimensionMismatch {
                    what: "record covariates",
                    expected: d,
                    found: bad.covariates.len(),
                });
            }
        }
        Ok(Self { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn covariate_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.covariates.len())
    }

    /// Largest recorded time, failure or censoring.
    pub fn max_time(&self) -> Option<f64> {
        self.records.iter().map(|r| r.time).reduce(f64::max)
    }

    pub fn censoring_rate(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| !r.event).count() as f64 / self.records.len() as f64
    }
}

/// Per-feature range of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormalizationStats {
    /// Maps each feature to `(x − min) / (max − min)`; constant features map to 0.
    ///
    /// Values outside the training range fall outside `[0, 1]` and are kept.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| {
                let span = hi - lo;
                if span > 0.0 {
                    (v - lo) / span
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }
}
