//! Finite-difference verification of analytic gradients.
//!
//! Runs at 64-bit precision: the analytic gradient of a scalar-valued graph
//! is compared coordinate-by-coordinate against central differences
//! (f(x+eps) - f(x-eps)) / 2eps.

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Worst relative error between analytic and numerical gradients over all
/// coordinates of all inputs. The relative error denominator is
/// max(|analytic|, |numerical|, 1e-8).
///
/// `build` must construct the same graph for any values of the inputs and
/// return a single-element loss node.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
{
    let eval = |points: &[Tensor<f64>]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = points.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::non_finite("grad_check", format!("loss value {value}")));
        }
        tape.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs)?;

    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        for ci in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[ci] += eps;
            let (fp, _) = eval(&plus)?;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[ci] -= eps;
            let (fm, _) = eval(&minus)?;
            let numerical = (fp - fm) / (2.0 * eps);
            if !numerical.is_finite() {
                return Err(Error::non_finite("grad_check", format!("numerical gradient at input {pi} coord {ci}")));
            }
            let a = analytic[pi][ci];
            let rel = (a - numerical).abs() / a.abs().max(numerical.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}
