//! Adam with bias correction, keyed by parameter name so optimizer state can
//! be checkpointed and restored for deterministic resume.

use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Number of completed optimizer steps.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// Advance the step counter.  Call once per batch, before the per-parameter
    /// [`Adam::step`] calls, so bias correction sees a consistent step index.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Contract("Adam::step before begin_step".into()));
        }
        if (param.rows, param.cols) != (grad.rows, grad.cols) {
            return Err(Error::Shape(format!(
                "optimizer step on '{}': param {}x{} vs grad {}x{}",
                name, param.rows, param.cols, grad.rows, grad.cols
            )));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for '{}'", name)));
        }
        let slot = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| Slot { m: vec![0.0; param.len()], v: vec![0.0; param.len()] });
        if slot.m.len() != param.len() {
            return Err(Error::Shape(format!(
                "optimizer slot for '{}' has {} entries, param has {}",
                name,
                slot.m.len(),
                param.len()
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in param
            .data
            .iter_mut()
            .zip(&grad.data)
            .zip(slot.m.iter_mut().zip(slot.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        if !param.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameter '{}' after optimizer step",
                name
            )));
        }
        Ok(())
    }

    // ── state round-trip for checkpoint resume ──────────────────────────────

    pub fn export_state(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.m.clone(), s.v.clone()))
            .collect()
    }

    pub fn restore_slot(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::Format(format!(
                "optimizer slot '{}' has mismatched m/v lengths",
                name
            )));
        }
        self.slots.insert(name.to_string(), Slot { m, v });
        Ok(())
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }
}
