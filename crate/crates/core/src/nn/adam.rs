use super::{Gradients, ParameterSet};
use crate::{Error, Result};

/// Moment accumulators for bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self::with_hyperparameters(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(params: &ParameterSet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// Applies one Adam step in place.
///
/// Non-finite gradients leave `params` and `state` untouched.
pub fn adam_update(
    params: &mut ParameterSet,
    grads: &Gradients,
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "learning rate {learning_rate} must be positive"
        )));
    }
    if params.shapes() != grads.shapes() || params.shapes() != state.first_moment.shapes() {
        return Err(Error::DimensionMismatch {
            what: "adam parameter count",
            expected: params.len(),
            found: grads.len(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient);
    }

    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let bias1 = 1.0 - b1.powf(state.step as f64);
    let bias2 = 1.0 - b2.powf(state.step as f64);

    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
