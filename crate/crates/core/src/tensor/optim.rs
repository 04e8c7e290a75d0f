//! SGD with momentum and L2 weight decay.

use super::params::ParamSet;
use super::Scalar;
use crate::error::{Error, Result};

/// Hyper-parameters of [`OptimState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

/// Velocity buffers, one per parameter, plus the hyper-parameters.
#[derive(Debug, Clone)]
pub struct OptimState<T: Scalar = f32> {
    pub hyper: Sgd,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ParamSet<T>, hyper: Sgd) -> Self {
        Self {
            hyper,
            velocity: params
                .tensors()
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// `v <- momentum * v + grad + weight_decay * p; p <- p - lr * v`, then
    /// clears every gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if params.len() != self.velocity.len()
            || params
                .tensors()
                .iter()
                .zip(&self.velocity)
                .any(|(t, v)| t.len() != v.len())
        {
            return Err(Error::InvalidArgument(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        if let Some(i) = params.tensors().iter().position(|t| t.grad().is_none()) {
            return Err(Error::MissingGradient(params.names()[i].clone()));
        }
        let lr = T::lit(self.hyper.learning_rate as f64);
        let mu = T::lit(self.hyper.momentum as f64);
        let wd = T::lit(self.hyper.weight_decay as f64);
        for (t, v) in params.tensors_mut().iter_mut().zip(&mut self.velocity) {
            let g = t.grad().expect("checked above").to_vec();
            for ((p, v), g) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g + wd * *p;
                *p = *p - lr * *v;
            }
            t.clear_grad();
        }
        Ok(())
    }
}

/// Free-function form of [`OptimState::step`].
pub fn sgd_momentum_step<T: Scalar>(params: &mut ParamSet<T>, state: &mut OptimState<T>) -> Result<()> {
    state.step(params)
}
