use crate::error::{invalid, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * param`, `param <- param - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: T,
    pub weight_decay: T,
    velocities: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: T, weight_decay: T) -> Self {
        Self { momentum, weight_decay, velocities: Vec::new() }
    }

    /// One update over `params` paired with `grads` by position. Velocity
    /// buffers are allocated on first use and tied to that ordering.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]], lr: T) -> Result<()> {
        if !(lr > T::zero()) {
            return Err(invalid(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != grads.len() {
            return Err(invalid(format!("{} params but {} grads", params.len(), grads.len())));
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(invalid("parameter list changed between steps"));
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            if param.len() != grad.len() || vel.len() != grad.len() {
                return Err(invalid("gradient length does not match parameter"));
            }
            for ((p, &g), v) in param.values_mut().iter_mut().zip(grad.iter()).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p = *p - lr * *v;
            }
        }
        Ok(())
    }

    pub fn velocities(&self) -> &[Vec<T>] {
        &self.velocities
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::vector(vec![v]).unwrap()
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        sgd.step(&mut [&mut p], &[&[0.5, 0.25]], 1.0).unwrap();
        assert_eq!(p.values(), &[0.5, -2.25]);
    }

    #[test]
    fn weight_decay_alone() {
        let mut sgd = Sgd::new(0.0, 0.1);
        let mut p = one(10.0);
        sgd.step(&mut [&mut p], &[&[0.0]], 1.0).unwrap();
        assert!((p.item() - 9.0).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut sgd = Sgd::new(0.9, 0.0);
        let mut p = one(0.0);
        sgd.step(&mut [&mut p], &[&[1.0]], 1.0).unwrap();
        sgd.step(&mut [&mut p], &[&[1.0]], 1.0).unwrap();
        assert!((p.item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut sgd = Sgd::new(0.0, 0.0);
        let mut p = one(0.0);
        assert!(sgd.step(&mut [&mut p], &[&[1.0]], 0.0).is_err());
        assert!(sgd.step(&mut [&mut p], &[&[1.0]], -1.0).is_err());
    }
}
