//! Masked gradient descent.
//!
//! Freezing is enforced here, not in the backward pass: gradients are
//! always computed for every parameter, and the mask decides which entries
//! an update may touch. A frozen parameter is therefore bitwise identical
//! before and after any number of steps.

use crate::error::{Error, Result};
use crate::nn::model::NetworkModel;

/// Marks which parameters an optimizer step may modify.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainMask {
    trainable: Vec<bool>,
}

impl TrainMask {
    pub fn all(n: usize) -> TrainMask {
        TrainMask { trainable: vec![true; n] }
    }

    pub fn none(n: usize) -> TrainMask {
        TrainMask { trainable: vec![false; n] }
    }

    pub fn from_indices(n: usize, indices: &[usize]) -> TrainMask {
        let mut mask = TrainMask::none(n);
        for &i in indices {
            mask.trainable[i] = true;
        }
        mask
    }

    pub fn set(&mut self, index: usize, trainable: bool) {
        self.trainable[index] = trainable;
    }

    pub fn set_range(&mut self, range: std::ops::Range<usize>, trainable: bool) {
        for v in &mut self.trainable[range] {
            *v = trainable;
        }
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn n_trainable(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.trainable.len()).filter(|&i| self.trainable[i]).collect()
    }
}

/// Plain gradient descent with optional classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64) -> Sgd {
        Sgd { lr, momentum: 0.0, velocity: Vec::new() }
    }

    pub fn with_momentum(lr: f64, momentum: f64) -> Sgd {
        Sgd { lr, momentum, velocity: Vec::new() }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update in place, skipping frozen parameters.
    pub fn step(&mut self, model: &mut NetworkModel, grad: &[f64], mask: &TrainMask) -> Result<()> {
        let n = model.n_params();
        if grad.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} parameters"),
                actual: format!("{} gradient / {} mask entries", grad.len(), mask.len()),
            });
        }
        let params = model.params_mut();
        if self.momentum == 0.0 {
            for i in 0..n {
                if mask.is_trainable(i) {
                    params[i] -= self.lr * grad[i];
                }
            }
        } else {
            if self.velocity.len() != n {
                self.velocity = vec![0.0; n];
            }
            for i in 0..n {
                if mask.is_trainable(i) {
                    self.velocity[i] = self.momentum * self.velocity[i] + grad[i];
                    params[i] -= self.lr * self.velocity[i];
                }
            }
        }
        Ok(())
    }
}
