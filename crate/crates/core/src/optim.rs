//! Momentum SGD over named parameter lists.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Stateful momentum SGD; velocity buffers are keyed by parameter index,
/// so the caller must pass parameters in a stable order.
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    /// One update step: v <- momentum*v + (g + weight_decay*w); w <- w - lr*v.
    /// With momentum 0 and decay 0 this reduces to w <- w - lr*g.
    /// Non-finite gradients are rejected so training can abort with context.
    pub fn step(&mut self, params: &mut [(&str, &mut [T])], grads: &[Vec<T>], lr: T) -> Result<()> {
        if lr <= T::zero() {
            return Err(Error::invalid("sgd_step", "learning rate must be positive"));
        }
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "sgd_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.velocity.len() < params.len() {
            for (_, p) in params[self.velocity.len()..].iter() {
                self.velocity.push(vec![T::zero(); p.len()]);
            }
        }
        for (idx, ((name, p), g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::invalid(
                    "sgd_step",
                    format!("parameter {name} has {} values but gradient has {}", p.len(), g.len()),
                ));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::non_finite("sgd_step", format!("gradient of {name} at index {bad}")));
            }
            let v = &mut self.velocity[idx];
            for ((w, &gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let eff = gv + self.weight_decay * *w;
                *vv = self.momentum * *vv + eff;
                *w = *w - lr * *vv;
            }
        }
        Ok(())
    }
}

/// Plain single-parameter update used in small fixtures and docs.
pub fn sgd_update<T: Scalar>(w: &mut [T], g: &[T], lr: T) {
    for (wv, &gv) in w.iter_mut().zip(g) {
        *wv = *wv - lr * gv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_matches_formula() {
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut w = vec![1.0f64];
        let g = vec![vec![0.5]];
        sgd.step(&mut [("w", &mut w)], &g, 0.1).unwrap();
        assert!((w[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut w = vec![3.0f64, -2.0];
        sgd.step(&mut [("w", &mut w)], &[vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(w, vec![3.0, -2.0]);
    }

    #[test]
    fn momentum_unrolls_as_expected() {
        // v1 = 1, w = -0.1; v2 = 0.9 + 1 = 1.9, w = -0.1 - 0.19 = -0.29
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut w = vec![0.0f64];
        sgd.step(&mut [("w", &mut w)], &[vec![1.0]], 0.1).unwrap();
        assert!((w[0] + 0.1).abs() < 1e-15);
        sgd.step(&mut [("w", &mut w)], &[vec![1.0]], 0.1).unwrap();
        assert!((w[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut w = vec![1.0f64];
        let err = sgd.step(&mut [("w", &mut w)], &[vec![f64::NAN]], 0.1);
        assert!(err.is_err());
        assert_eq!(w, vec![1.0], "rejected step must not modify parameters");
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut w = vec![1.0f64];
        assert!(sgd.step(&mut [("w", &mut w)], &[vec![0.0]], 0.0).is_err());
    }
}
