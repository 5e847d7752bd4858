//! Adam and RMSprop with per-parameter moment slots.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Rmsprop { rho: f64, eps: f64 },
}

impl OptimizerConfig {
    pub const ADAM: OptimizerConfig = OptimizerConfig::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    pub const RMSPROP: OptimizerConfig = OptimizerConfig::Rmsprop { rho: 0.9, eps: 1e-8 };
}

/// Moment buffers are kept in `f64`, indexed like the parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        // slots follow store index order, not name order
        let mut first = vec![Vec::new(); params.len()];
        let mut second = vec![Vec::new(); params.len()];
        for (id, p) in params.iter() {
            if p.trainable {
                first[id.index()] = vec![0.0; p.value.len()];
                if matches!(config, OptimizerConfig::Adam { .. }) {
                    second[id.index()] = vec![0.0; p.value.len()];
                }
            }
        }
        Optimizer {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// One update with learning rate `lr`. Every gradient is checked before
    /// any parameter changes, so a non-finite gradient leaves the store
    /// untouched and names the parameter.
    pub fn apply(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        for (id, p) in params.iter() {
            if let Some(g) = grads.param(id) {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: format!("gradient of `{}`", p.name),
                        detail: format!("element {i} is {}", g[i]),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let ids: Vec<_> = params.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let w = params.get_mut(id).value.data_mut();
            let k = id.index();
            match self.config {
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..w.len() {
                        let gi = g[i] as f64;
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let delta = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        w[i] = (w[i] as f64 - delta) as f32;
                    }
                }
                OptimizerConfig::Rmsprop { rho, eps } => {
                    let s = &mut self.first[k];
                    for i in 0..w.len() {
                        let gi = g[i] as f64;
                        s[i] = rho * s[i] + (1.0 - rho) * gi * gi;
                        let delta = lr * gi / (s[i] + eps).sqrt();
                        w[i] = (w[i] as f64 - delta) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
