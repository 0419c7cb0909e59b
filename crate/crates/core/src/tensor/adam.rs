use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, config: AdamConfig) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
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

    pub fn first_moment(&self, i: usize) -> &[f32] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f32] {
        &self.v[i]
    }

    /// One bias-corrected Adam update. Leaves everything untouched if any
    /// gradient is non-finite or shapes do not line up.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f32) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "state tracks {} parameters, got {} params and {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i}: shape {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                log::error!("adam_step: non-finite gradient for parameter {i}, step rejected");
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }

        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = gi as f64;
                let m_new = beta1 * *mi as f64 + (1.0 - beta1) * gi;
                let v_new = beta2 * *vi as f64 + (1.0 - beta2) * gi * gi;
                *mi = m_new as f32;
                *vi = v_new as f32;
                let update = lr as f64 * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
