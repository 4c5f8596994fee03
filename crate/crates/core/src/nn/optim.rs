use serde::{Deserialize, Serialize};

use super::{Param, Scalar, Visit};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adaptive moment estimation with bias correction. Moment buffers are
/// matched to parameters by visit order.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` to every visited parameter.
    pub fn step<T: Scalar>(&mut self, lr: f64, visit: impl FnOnce(&mut dyn Visit<T>)) {
        self.step += 1;
        let t = self.step as i32;
        let mut pass = AdamPass {
            cfg: self.cfg,
            lr,
            bc1: 1.0 - self.cfg.beta1.powi(t),
            bc2: 1.0 - self.cfg.beta2.powi(t),
            moments: &mut self.moments,
            index: 0,
        };
        visit(&mut pass);
    }
}

struct AdamPass<'a> {
    cfg: AdamConfig,
    lr: f64,
    bc1: f64,
    bc2: f64,
    moments: &'a mut Vec<(Vec<f64>, Vec<f64>)>,
    index: usize,
}

impl<T: Scalar> Visit<T> for AdamPass<'_> {
    fn param(&mut self, _name: &str, p: &mut Param<T>) {
        if self.moments.len() == self.index {
            self.moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
        }
        let (m, v) = &mut self.moments[self.index];
        assert_eq!(m.len(), p.len(), "parameter layout changed between optimizer steps");
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for ((w, g), (m, v)) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut().zip(v.iter_mut())) {
            let g = g.to_f64().unwrap();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let update = self.lr * (*m / self.bc1) / ((*v / self.bc2).sqrt() + eps);
            *w = T::lit(w.to_f64().unwrap() - update);
        }
        self.index += 1;
    }

    fn buffer(&mut self, _name: &str, _b: &mut Vec<T>) {}
}
