use super::{Gradients, ParameterSet};
use crate::Result;

/// Central-difference comparison of analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub mean_relative_error: f64,
    pub n_parameters: usize,
    pub tolerance: f64,
    /// Entry with the largest error, with its analytic and numeric values.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

const RELATIVE_STEP: f64 = 1e-5;
const DENOMINATOR_FLOOR: f64 = 1e-6;

/// Compares the gradient returned by `loss` with central differences.
///
/// The step for parameter `θ` is `1e-5 · max(1, |θ|)`. The relative error of
/// one entry is `|g − ĝ| / max(|g|, |ĝ|, 1e-6 · max(1, |L|))`, the floor
/// tracking the round-off in differences of the loss `L`.
/// `loss` must be deterministic: dropout off and integration nodes frozen.
pub fn gradient_check<F>(params: &ParameterSet, loss: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet) -> Result<(f64, Gradients)>,
{
    let (value, analytic) = loss(params)?;
    let floor = DENOMINATOR_FLOOR * value.abs().max(1.0);
    let analytic: Vec<f64> = analytic.iter().copied().collect();
    let mut probe = params.clone();
    let mut max_rel = 0.0f64;
    let mut sum_rel = 0.0;
    let mut worst = None;

    for (idx, &g) in analytic.iter().enumerate() {
        let theta = *params.iter().nth(idx).expect("index in range");
        let h = RELATIVE_STEP * theta.abs().max(1.0);
        *probe.iter_mut().nth(idx).expect("index in range") = theta + h;
        let (up, _) = loss(&probe)?;
        *probe.iter_mut().nth(idx).expect("index in range") = theta - h;
        let (down, _) = loss(&probe)?;
        *probe.iter_mut().nth(idx).expect("index in range") = theta;

        let numeric = (up - down) / (2.0 * h);
        let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(floor);
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            worst = Some((idx, g, numeric));
        }
        sum_rel += rel;
    }

    Ok(GradCheckReport {
        max_relative_error: max_rel,
        mean_relative_error: if analytic.is_empty() {
            0.0
        } else {
            sum_rel / analytic.len() as f64
        },
        n_parameters: analytic.len(),
        tolerance,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{loss_gradients, MlpConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_loss_is_checked_tightly() {
        let cfg = MlpConfig::new(2, 1, 3, 1, 0.0).unwrap();
        let params = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let report = gradient_check(
            &params,
            |p| {
                loss_gradients(p, |tape| {
                    let mut acc = None;
                    for layer in 0..p.layers.len() {
                        let w = tape.weight(layer)?;
                        let sq = tape.square(w)?;
                        let s = tape.sum(sq)?;
                        acc = Some(match acc {
                            None => s,
                            Some(a) => tape.add(a, s)?,
                        });
                    }
                    Ok(acc.unwrap())
                })
            },
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.n_parameters, params.len());
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let cfg = MlpConfig::new(1, 0, 1, 1, 0.0).unwrap();
        let mut params = ParameterSet::zeros(&cfg);
        params.iter_mut().for_each(|p| *p = 1.0);
        let report = gradient_check(
            &params,
            |p| {
                let value: f64 = p.iter().map(|v| v * v).sum();
                let mut g = Gradients::zeros_like(p);
                g.iter_mut().for_each(|x| *x = 1.0); // true gradient is 2
                Ok((value, g))
            },
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        assert!((report.max_relative_error - 0.5).abs() < 1e-6);
    }
}
