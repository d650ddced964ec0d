//! KS distances against known ground truth, ROC analysis of the replacement
//! rule, and the tables behind the plots.

use std::io::Write;

use crate::data::Dataset;
use crate::datagen::{weibull_survival, WeibullParams};
use crate::ebm::{EnergyModel, IntegrationSpec};
use crate::model::{EbmPredictor, SurvivalModel};
use crate::training::TrainHistory;
use crate::{Error, Result};

pub const KS_GRID_POINTS: usize = 100;

/// `n` equidistant points from 0 to `t_m`, both included.
pub fn ks_grid(t_m: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n)
            .map(|i| if i + 1 == n { t_m } else { t_m * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Largest absolute gap between two curves sampled on the same grid.
pub fn ks_distance(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            what: "KS curves",
            expected: truth.len(),
            found: predicted.len(),
        });
    }
    Ok(predicted
        .iter()
        .zip(truth)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// KS distance of a model's curve at `x` from a Weibull ground truth.
pub fn ks_against_weibull(
    model: &dyn SurvivalModel,
    x: &[f64],
    truth: WeibullParams,
    t_m: f64,
) -> Result<f64> {
    let grid = ks_grid(t_m, KS_GRID_POINTS);
    let predicted = model.survival_curve(x, &grid)?;
    let exact: Vec<f64> = grid.iter().map(|&t| weibull_survival(t, truth)).collect();
    ks_distance(&predicted, &exact)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsGrid {
    pub lambda_range: (f64, f64),
    pub k_range: (f64, f64),
    pub n_lambda: usize,
    pub n_k: usize,
}

impl Default for KsGrid {
    fn default() -> Self {
        Self {
            lambda_range: (1.0, 3.0),
            k_range: (0.5, 5.0),
            n_lambda: 20,
            n_k: 20,
        }
    }
}

impl KsGrid {
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let axis = |(lo, hi): (f64, f64), n: usize| -> Vec<f64> {
            ks_grid(hi - lo, n).into_iter().map(|v| lo + v).collect()
        };
        let ks = axis(self.k_range, self.n_k);
        axis(self.lambda_range, self.n_lambda)
            .into_iter()
            .flat_map(|l| ks.iter().map(move |&k| (l, k)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsCell {
    pub lambda: f64,
    pub k: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KsReport {
    pub cells: Vec<KsCell>,
    pub mean: f64,
    pub grid: KsGrid,
    pub t_m: f64,
}

/// Mean KS over a grid of Weibull truths; the model sees `[λ, k]` as covariates.
pub fn mean_ks_on(model: &dyn SurvivalModel, t_m: f64, grid: KsGrid) -> Result<KsReport> {
    let cells = grid
        .cells()
        .into_iter()
        .map(|(lambda, k)| {
            let truth = WeibullParams::new(lambda, k)?;
            Ok(KsCell {
                lambda,
                k,
                distance: ks_against_weibull(model, &[lambda, k], truth, t_m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = cells.iter().map(|c| c.distance).sum::<f64>() / cells.len().max(1) as f64;
    Ok(KsReport {
        cells,
        mean,
        grid,
        t_m,
    })
}

pub fn mean_ks(model: &dyn SurvivalModel, t_m: f64) -> Result<KsReport> {
    mean_ks_on(model, t_m, KsGrid::default())
}

/// Outcome at the horizon: `Some(true)` failed within it, `Some(false)`
/// survived it, `None` censored earlier.
pub fn horizon_label(time: f64, event: bool, horizon: f64) -> Option<bool> {
    if event && time <= horizon {
        Some(true)
    } else if time >= horizon {
        Some(false)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Sorted by ascending threshold.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Trapezoidal area under ROC points.
pub fn auc(points: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.windows(2)
        .map(|w| (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1))
        .sum()
}

/// The exact empirical sweep: every observed score plus 0 and 1, and a
/// threshold above the top score when one reaches 1.
pub fn default_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut t: Vec<f64> = scores.iter().copied().chain([0.0, 1.0]).collect();
    let top = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top >= 1.0 {
        t.push(top.next_up());
    }
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// ROC for the rule "flag when score < J". Positives should get low scores.
pub fn roc_from_scores_at(scores: &[f64], labels: &[bool], thresholds: &[f64]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            what: "ROC labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("score {bad} is not finite")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateCurve(format!(
            "{positives} positives and {negatives} negatives"
        )));
    }
    let sorted = |want: bool| -> Vec<f64> {
        let mut v: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == want)
            .map(|(&s, _)| s)
            .collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let pos = sorted(true);
    let neg = sorted(false);
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_by(f64::total_cmp);
    let points: Vec<RocPoint> = thresholds
        .iter()
        .map(|&j| RocPoint {
            threshold: j,
            fpr: neg.partition_point(|&s| s < j) as f64 / negatives as f64,
            tpr: pos.partition_point(|&s| s < j) as f64 / positives as f64,
        })
        .collect();
    Ok(RocCurve {
        auc: auc(&points),
        points,
        positives,
        negatives,
    })
}

pub fn roc_from_scores(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    roc_from_scores_at(scores, labels, &default_thresholds(scores))
}

/// Horizon survival scores and outcomes for the records with a known outcome.
pub fn horizon_scores(
    model: &dyn SurvivalModel,
    dataset: &Dataset,
    horizon: f64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in &dataset.records {
        if let Some(label) = horizon_label(r.time, r.event, horizon) {
            scores.push(model.survival(horizon, &r.covariates)?);
            labels.push(label);
        }
    }
    Ok((scores, labels))
}

/// ROC of the replacement decision at `horizon`; `None` sweeps every observed score.
pub fn roc_curve(
    model: &dyn SurvivalModel,
    dataset: &Dataset,
    horizon: f64,
    thresholds: Option<&[f64]>,
) -> Result<RocCurve> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("horizon {horizon} must be positive")));
    }
    let (scores, labels) = horizon_scores(model, dataset, horizon)?;
    match thresholds {
        Some(t) => roc_from_scores_at(&scores, &labels, t),
        None => roc_from_scores(&scores, &labels),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub method: &'static str,
    pub points: usize,
    pub repetitions: usize,
    pub mean_ks: f64,
    pub min_ks: f64,
    pub max_ks: f64,
}

/// Mean KS for each node count under both rules. Monte Carlo is repeated
/// with seeds `seed..seed + repetitions`; the trapezoid rule runs once.
pub fn integration_convergence_report(
    model: &EnergyModel,
    t_m: f64,
    point_counts: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<ConvergenceRow>> {
    if repetitions == 0 {
        return Err(Error::InvalidConfig("at least one repetition is needed".into()));
    }
    let mut rows = Vec::new();
    for &n in point_counts {
        let mut values = Vec::with_capacity(repetitions);
        for r in 0..repetitions as u64 {
            let spec = IntegrationSpec::MonteCarlo {
                samples: n,
                seed: seed.wrapping_add(r),
            };
            values.push(mean_ks(&EbmPredictor::new(model, spec), t_m)?.mean);
        }
        rows.push(ConvergenceRow {
            method: "mc",
            points: n,
            repetitions,
            mean_ks: values.iter().sum::<f64>() / repetitions as f64,
            min_ks: values.iter().copied().fold(f64::INFINITY, f64::min),
            max_ks: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        if n >= 2 {
            let spec = IntegrationSpec::Trapezoid { points: n };
            let v = mean_ks(&EbmPredictor::new(model, spec), t_m)?.mean;
            rows.push(ConvergenceRow {
                method: "trapezoid",
                points: n,
                repetitions: 1,
                mean_ks: v,
                min_ks: v,
                max_ks: v,
            });
        }
    }
    Ok(rows)
}

/// A labelled survival curve for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub label: String,
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

/// `fig3_valloss.csv`: `run,epoch,train_loss,val_loss`.
pub fn write_loss_histories<W: Write>(runs: &[(String, TrainHistory)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["run", "epoch", "train_loss", "val_loss"])?;
    for (label, h) in runs {
        for (epoch, (tr, va)) in h.train_loss.iter().zip(&h.val_loss).enumerate() {
            w.write_record([label.clone(), epoch.to_string(), tr.to_string(), va.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `fig4_convergence.csv`: `method,points,repetitions,mean_ks,min_ks,max_ks`.
pub fn write_convergence<W: Write>(rows: &[ConvergenceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["method", "points", "repetitions", "mean_ks", "min_ks", "max_ks"])?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.points.to_string(),
            r.repetitions.to_string(),
            r.mean_ks.to_string(),
            r.min_ks.to_string(),
            r.max_ks.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-cell KS distances: `lambda,k,ks`.
pub fn write_ks_report<W: Write>(report: &KsReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lambda", "k", "ks"])?;
    for c in &report.cells {
        w.write_record([c.lambda.to_string(), c.k.to_string(), c.distance.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `fig5_curves.csv`: `label,t,survival`.
pub fn write_curves<W: Write>(curves: &[CurveSeries], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "t", "survival"])?;
    for c in curves {
        for (t, s) in c.times.iter().zip(&c.survival) {
            w.write_record([c.label.clone(), t.to_string(), s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `fig6_roc.csv`: `label,threshold,fpr,tpr`.
pub fn write_roc<W: Write>(curves: &[(String, RocCurve)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["label", "threshold", "fpr", "tpr"])?;
    for (label, c) in curves {
        for p in &c.points {
            w.write_record([
                label.clone(),
                p.threshold.to_string(),
                p.fpr.to_string(),
                p.tpr.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SurvivalRecord;
    use crate::model::{ConstantSurvival, WeibullOracle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_is_inclusive() {
        let g = ks_grid(3.0, 100);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[99], 3.0);
    }

    #[test]
    fn ks_of_identical_and_flat_curves() {
        let w = WeibullParams::new(2.0, 1.0).unwrap();
        assert_eq!(ks_against_weibull(&WeibullOracle, &[2.0, 1.0], w, 3.0).unwrap(), 0.0);
        let d = ks_against_weibull(&ConstantSurvival(1.0), &[2.0, 1.0], w, 3.0).unwrap();
        assert!((d - (1.0 - (-1.5f64).exp())).abs() < 1e-12);
        assert!(ks_distance(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn mean_ks_of_oracle_and_constant() {
        assert_eq!(mean_ks(&WeibullOracle, 4.0).unwrap().mean, 0.0);
        let r = mean_ks(&ConstantSurvival(0.5), 4.0).unwrap();
        assert_eq!(r.cells.len(), 400);
        assert!(r.mean <= 0.5);
        let brute = r.cells.iter().map(|c| c.distance).sum::<f64>() / 400.0;
        assert!((r.mean - brute).abs() < 1e-15);
        let cells = KsGrid::default().cells();
        assert_eq!(cells[0], (1.0, 0.5));
        assert_eq!(cells[399], (3.0, 5.0));
    }

    #[test]
    fn horizon_labelling() {
        assert_eq!(horizon_label(0.2, true, 0.5), Some(true));
        assert_eq!(horizon_label(0.5, true, 0.5), Some(true));
        assert_eq!(horizon_label(0.2, false, 0.5), None);
        assert_eq!(horizon_label(0.5, false, 0.5), Some(false));
        assert_eq!(horizon_label(0.9, true, 0.5), Some(false));
    }

    #[test]
    fn extreme_thresholds_give_corners() {
        let c = roc_from_scores(&[0.9, 0.2, 0.5, 1.0], &[false, true, true, false]).unwrap();
        let first = c.points.first().unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(c.auc, 1.0);
        let at = roc_from_scores_at(&[0.3, 0.6], &[true, false], &[0.0, 1.0]).unwrap();
        assert_eq!((at.points[0].fpr, at.points[0].tpr), (0.0, 0.0));
        assert_eq!((at.points[1].fpr, at.points[1].tpr), (1.0, 1.0));
    }

    #[test]
    fn auc_examples() {
        let p = |fpr, tpr| RocPoint {
            threshold: 0.0,
            fpr,
            tpr,
        };
        assert_eq!(auc(&[p(0.0, 0.0), p(1.0, 1.0)]), 0.5);
        assert_eq!(auc(&[p(0.0, 0.0), p(0.0, 1.0), p(1.0, 1.0)]), 1.0);
    }

    #[test]
    fn degenerate_classes_are_errors() {
        assert!(matches!(
            roc_from_scores(&[0.1, 0.2], &[true, true]),
            Err(Error::DegenerateCurve(_))
        ));
    }

    #[test]
    fn tied_scores_give_the_diagonal() {
        let c = roc_from_scores(&[0.4; 6], &[true, false, true, false, false, true]).unwrap();
        assert!((c.auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn random_scorer_is_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scores: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        let c = roc_from_scores(&scores, &labels).unwrap();
        assert!((c.auc - 0.5).abs() < 0.02, "{}", c.auc);
    }

    #[test]
    fn oracle_on_separable_data() {
        // short-lived subjects fail early; the oracle ranks them perfectly
        let recs: Vec<SurvivalRecord> = (0..20)
            .map(|i| {
                let (lambda, time) = if i % 2 == 0 { (0.2, 0.1) } else { (50.0, 5.0) };
                SurvivalRecord::new(i, vec![lambda, 1.0], time, true).unwrap()
            })
            .collect();
        let ds = Dataset::new(recs).unwrap();
        let c = roc_curve(&WeibullOracle, &ds, 1.0, None).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!((c.positives, c.negatives), (10, 10));
    }

    #[test]
    fn csv_headers() {
        let mut buf = Vec::new();
        write_curves(
            &[CurveSeries {
                label: "a".into(),
                times: vec![0.0],
                survival: vec![1.0],
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "label,t,survival\na,0,1\n");
        let mut buf = Vec::new();
        write_convergence(&[], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("method,points"));
    }
}
