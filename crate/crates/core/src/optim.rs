//! SGD with momentum and RMSprop, following the PyTorch update rules.
//!
//! Parameters without a gradient in the store are skipped entirely (no decay,
//! no state change), so an arm that does not take part in a loss is left
//! bit-for-bit untouched.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<()> {
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut d = g.detach();
            if self.weight_decay != 0.0 {
                d = (d + (&p * self.weight_decay)?)?;
            }
            if self.momentum != 0.0 {
                let buf = match self.buffers.get(name) {
                    Some(b) => ((b * self.momentum)? + &d)?,
                    None => d.copy()?,
                };
                self.buffers.insert(name.clone(), buf.clone());
                d = buf;
            }
            var.set(&(p - (d * lr)?)?)?;
        }
        Ok(())
    }

    pub fn state(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn load_state(&mut self, buffers: BTreeMap<String, Tensor>) {
        self.buffers = buffers;
    }
}

#[derive(Debug, Clone)]
pub struct RmsProp {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    square_avg: BTreeMap<String, Tensor>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            alpha: 0.99,
            eps: 1e-8,
            square_avg: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let sq = match self.square_avg.get(name) {
                Some(v) => ((v * self.alpha)? + (g.sqr()? * (1.0 - self.alpha))?)?,
                None => (g.sqr()? * (1.0 - self.alpha))?,
            };
            let denom = (sq.sqrt()? + self.eps)?;
            let update = ((g / denom)? * self.lr)?;
            self.square_avg.insert(name.clone(), sq);
            var.set(&(var.as_tensor().detach() - update)?)?;
        }
        Ok(())
    }
}
