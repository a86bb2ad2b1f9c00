use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{CatrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Self { cfg, t: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update from the gradients accumulated in `store`
    /// (scaled by `grad_scale`), then clears them. Parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grad_scale: f64) -> Result<()> {
        self.t += 1;
        let mut norm2 = 0.0;
        for id in store.ids() {
            if let Some(g) = store.get(id).grad() {
                norm2 += g.iter().map(|x| (x * grad_scale).powi(2)).sum::<f64>();
            }
        }
        if !norm2.is_finite() {
            return Err(CatrError::Numeric("non-finite gradient norm".into()));
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if norm2.sqrt() > c => c / norm2.sqrt(),
            _ => 1.0,
        };
        let scale = grad_scale * clip;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = store.get(id).grad().map(<[f64]>::to_vec) else { continue };
            let i = id.0;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
