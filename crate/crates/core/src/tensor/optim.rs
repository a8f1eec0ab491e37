use std::collections::BTreeMap;

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
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
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW<S: Real = f32> {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Vec<S>>,
    second: BTreeMap<String, Vec<S>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[S], &[S])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// One update of every parameter. A parameter without a gradient entry
    /// is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor<S>>, grads: &BTreeMap<String, Vec<S>>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let g = grads.get(name);
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i].as_f64());
                let mi = c.beta1 * m[i].as_f64() + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v[i].as_f64() + (1.0 - c.beta2) * gi * gi;
                m[i] = S::from_f64_lossy(mi);
                v[i] = S::from_f64_lossy(vi);
                let theta = p.data()[i].as_f64();
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                let next = theta * (1.0 - c.lr * c.weight_decay) - c.lr * update;
                p.data_mut()[i] = S::from_f64_lossy(next);
            }
        }
    }
}
