//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it is used to verify.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest norm-wise relative error over all inputs.
    pub max_rel_error: f64,
    /// Smallest |pre-activation| seen by a ReLU, if the graph has any.
    pub relu_margin: Option<f64>,
    /// Smallest layer-norm row scale in the graph, if it has any.
    pub layer_norm_scale: Option<f64>,
}

impl GradCheckReport {
    /// True when every ReLU input is more than `10·step` from its kink.
    /// Upstream weights amplify a perturbation of `step`, so a margin of
    /// just `step` is not enough to keep the probe on one side.
    pub fn kink_free(&self, step: f64) -> bool {
        self.relu_margin.is_none_or(|m| m > 10.0 * step)
    }

    /// True when no ReLU kink is within reach and every layer norm row is
    /// wide enough (`scale > 300·step`) that the `(step/scale)²` truncation
    /// error of a central difference stays small.
    pub fn well_conditioned(&self, step: f64) -> bool {
        self.kink_free(step) && self.layer_norm_scale.is_none_or(|s| s > 300.0 * step)
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central difference `(f(x+h) − f(x−h)) / 2h` for every coordinate of `x`.
pub fn numeric_gradient<T: Scalar>(mut f: impl FnMut(&[T]) -> T, x: &[T], step: T) -> Vec<T> {
    let mut probe = x.to_vec();
    let two_h = step + step;
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / two_h
        })
        .collect()
}

/// Compares backward gradients of `build` against central differences for
/// every input tensor. `build` receives the inputs as trainable leaves and
/// must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let relu_margin = tape.min_relu_margin();
    let layer_norm_scale = tape.min_layer_norm_scale();

    let eval = |which: usize, data: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, t)| {
                if k == which {
                    tape.param(&Tensor::new(t.shape().to_vec(), data.to_vec()).expect("same shape"))
                } else {
                    tape.param(t)
                }
            })
            .collect();
        let out = build(&tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut max_rel_error: f64 = 0.0;
    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let mut failure = None;
        let numeric = numeric_gradient(
            |x| match eval(k, x) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            input.data(),
            step,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let zeros = vec![0.0; input.len()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        max_rel_error = max_rel_error.max(relative_error(analytic, &numeric));
    }
    Ok(GradCheckReport {
        max_rel_error,
        relu_margin,
        layer_norm_scale,
    })
}
