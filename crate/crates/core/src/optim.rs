//! Decoupled-weight-decay Adam and the warmup + cosine learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled decay coefficient; applied only to parameters flagged for
    /// decay (matrices — not biases, norm affines, or embedding tables).
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { betas: (0.9, 0.999), eps: 1e-8, weight_decay: 0.05 }
    }
}

/// First/second-moment state per parameter, allocated on first touch.
pub struct AdamW<T: Element> {
    pub cfg: AdamWConfig,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
    step: u64,
}

impl<T: Element> AdamW<T> {
    pub fn new(cfg: AdamWConfig, num_params: usize) -> Self {
        AdamW {
            cfg,
            m: (0..num_params).map(|_| None).collect(),
            v: (0..num_params).map(|_| None).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the given (parameter, gradient) pairs:
    /// `m ← β₁m + (1-β₁)g`, `v ← β₂v + (1-β₂)g²`, bias-corrected, then
    /// `p ← p − lr·m̂/(√v̂+ε) − lr·λ·p` with the decay term outside the
    /// adaptive rescaling.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (id, g) in grads {
            let idx = id.index();
            if idx >= self.m.len() {
                return Err(Error::invalid(format!(
                    "optimizer sized for {} params, got id {idx}",
                    self.m.len()
                )));
            }
            let param = store.get(*id);
            if param.value.dims() != g.dims() {
                return Err(Error::shape(format!(
                    "gradient dims {:?} vs parameter {:?} ({})",
                    g.dims(),
                    param.value.dims(),
                    param.name
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient for {} non-finite", param.name)));
            }
            let m_prev = match &self.m[idx] {
                Some(t) => t.clone(),
                None => Tensor::zeros(g.dims().to_vec())?,
            };
            let v_prev = match &self.v[idx] {
                Some(t) => t.clone(),
                None => Tensor::zeros(g.dims().to_vec())?,
            };
            let tb1 = T::from_f64(b1);
            let tb2 = T::from_f64(b2);
            let m_new = m_prev.zip_map(g, |m, gv| tb1 * m + (T::one() - tb1) * gv)?;
            let v_new = v_prev.zip_map(g, |v, gv| tb2 * v + (T::one() - tb2) * gv * gv)?;

            let decay = if param.decay { self.cfg.weight_decay } else { 0.0 };
            let scale = T::from_f64(lr / bc1);
            let vb = T::from_f64(bc2);
            let eps = T::from_f64(self.cfg.eps);
            let shrink = T::from_f64(lr * decay);
            let adaptive = m_new.zip_map(&v_new, |m, v| scale * m / ((v / vb).sqrt() + eps))?;
            let new_value = param
                .value
                .zip_map(&adaptive, |p, a| p - a - shrink * p)?;
            store.set_value(*id, new_value);
            self.m[idx] = Some(m_new);
            self.v[idx] = Some(v_new);
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to `min_lr`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Schedule { base_lr, warmup_steps, total_steps: total_steps.max(1), min_lr: 0.0 }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.min_lr
            + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
