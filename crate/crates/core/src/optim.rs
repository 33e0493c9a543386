//! SGD with heavy-ball momentum.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<Option<Tensor>>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate {learning_rate} must be >= 0"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum {momentum} must lie in [0,1)"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// `v <- momentum * v + g; p <- p - lr * v`, then zero the gradients.
    /// Frozen parameters (no grad buffer) are skipped.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_sets(&mut [params])
    }

    /// One step over several parameter sets that are optimized together.
    /// The sets must be passed in the same order on every call.
    pub fn step_sets(&mut self, sets: &mut [&mut ParamSet]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = sets
                .iter()
                .map(|s| s.iter().map(|_| None).collect())
                .collect();
        }
        let layout_ok = self.velocity.len() == sets.len()
            && self
                .velocity
                .iter()
                .zip(sets.iter())
                .all(|(v, s)| v.len() == s.len());
        if !layout_ok {
            return Err(Error::invalid(
                "optimizer called with a different parameter layout",
            ));
        }
        for p in sets.iter().flat_map(|s| s.iter()) {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter {}",
                        p.name
                    )));
                }
            }
        }
        let (lr, momentum) = (self.learning_rate, self.momentum);
        for (params, vels) in sets.iter_mut().zip(self.velocity.iter_mut()) {
            apply(lr, momentum, params, vels)?;
        }
        Ok(())
    }
}

fn apply(lr: f64, momentum: f64, params: &mut ParamSet, vels: &mut [Option<Tensor>]) -> Result<()> {
    for (p, v) in params.iter_mut().zip(vels.iter_mut()) {
        let Some(g) = &mut p.grad else { continue };
        let vel = v.get_or_insert_with(|| Tensor::zeros(g.shape()));
        if vel.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", vel.shape(), p.value.shape()));
        }
        for ((w, vv), gv) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(vel.data_mut())
            .zip(g.data_mut())
        {
            *vv = momentum * *vv + *gv;
            *w -= lr * *vv;
            *gv = 0.0;
        }
    }
    Ok(())
}
