//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::Parameters;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

/// Moments exist only for the arrays of the parameter set it was built for.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &dyn Parameters) -> Self {
        let mut m = BTreeMap::new();
        params.visit(&mut |n, t| {
            m.insert(n.to_string(), vec![0.0; t.numel()]);
        });
        let v = m.clone();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Every gradient must name an owned array; arrays without
    /// a gradient are treated as having a zero gradient.
    pub fn step(
        &mut self,
        params: &mut dyn Parameters,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        if let Some(n) = grads.keys().find(|n| !self.m.contains_key(*n)) {
            return Err(Error::Ownership(format!(
                "gradient for {n:?}, which this optimizer does not own"
            )));
        }
        for (n, g) in grads {
            if g.numel() != self.m[n].len() {
                return Err(Error::shape("adamw_step", g.shape(), &[self.m[n].len()]));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - c.lr * c.weight_decay;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut missing = None;
        params.visit_mut(&mut |n, theta| {
            let (Some(m), Some(v)) = (ms.get_mut(n), vs.get_mut(n)) else {
                missing = Some(n.to_string());
                return;
            };
            let g = grads.get(n).map(Tensor::data);
            for (i, p) in theta.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                *p *= decay;
                *p -= c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        });
        match missing {
            Some(n) => Err(Error::Ownership(format!(
                "array {n:?} has no optimizer state"
            ))),
            None => Ok(()),
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let c = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
    norm
}
