//! Central finite differences against the analytic batch gradient.

use super::model::ToyEncoder;
use super::objective::{batch_objective, batch_targets, forward_batch, objective_value, LossSettings};
use super::{Result, TrainerError};

/// Largest parameter count accepted by [`gradient_check`].
pub const MAX_CHECK_PARAMETERS: usize = 2000;

pub const DEFAULT_CHECK_EPS: f64 = 1e-5;

/// Maximum over parameters of `|g - g_fd| / max(|g|, 1e-8)` for the weighted
/// objective `sum_i w_i L_i`.
///
/// Weights and detached targets are fixed at their values for the
/// unperturbed parameters, which is the convention the analytic gradient
/// follows.
pub fn gradient_check(
    encoder: &ToyEncoder,
    settings: &LossSettings,
    inputs_a: &[&[f64]],
    inputs_b: &[&[f64]],
    weights: &[f64],
    eps: f64,
) -> Result<f64> {
    let count = encoder.num_parameters();
    if count > MAX_CHECK_PARAMETERS {
        return Err(TrainerError::InvalidConfig(format!(
            "gradient check needs at most {MAX_CHECK_PARAMETERS} parameters, encoder has {count}"
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(TrainerError::InvalidConfig(format!("eps = {eps}")));
    }
    let (acts_a, acts_b) = forward_batch(encoder, inputs_a, inputs_b)?;
    let targets = batch_targets(encoder, settings, &acts_a, &acts_b)?;
    let analytic = batch_objective(encoder, settings, &acts_a, &acts_b, weights, &targets)?
        .grads
        .flatten();

    let params = encoder.flatten();
    let mut probe = encoder.clone();
    let mut worst = 0.0_f64;
    for (i, g) in analytic.iter().enumerate() {
        let base = params[i];
        *probe.parameter_mut(i).expect("index below parameter count") = base + eps;
        let plus = objective_value(&probe, settings, inputs_a, inputs_b, weights, &targets)?;
        *probe.parameter_mut(i).expect("index below parameter count") = base - eps;
        let minus = objective_value(&probe, settings, inputs_a, inputs_b, weights, &targets)?;
        *probe.parameter_mut(i).expect("index below parameter count") = base;
        let fd = (plus - minus) / (2.0 * eps);
        worst = worst.max((g - fd).abs() / g.abs().max(1e-8));
    }
    Ok(worst)
}
