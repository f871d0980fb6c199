//! Stochastic gradient descent with classical momentum:
//! v <- momentum * v + g, p <- p - lr * v, gradients cleared after use.

use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

pub struct Sgd<T: Scalar> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    /// Apply one update to every parameter. The parameter list must be the
    /// same (same order, same shapes) on every call, since velocity buffers
    /// are positional.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        assert_eq!(self.velocity.len(), params.len(), "parameter count changed between steps");
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.take_grad().ok_or(CoreError::MissingGradient { index: i })?;
            let v = &mut self.velocity[i];
            assert_eq!(v.len(), p.len(), "parameter shape changed between steps");
            for ((vj, pj), gj) in v.iter_mut().zip(p.data_mut()).zip(g) {
                *vj = self.momentum * *vj + gj;
                *pj = *pj - self.lr * *vj;
            }
        }
        Ok(())
    }
}
