//! Rectified Adam.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl RAdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter moments and step counts. Parameters that receive no
/// gradient in a step are left untouched, state included.
#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    cfg: RAdamConfig,
    slots: BTreeMap<String, Slot>,
}

impl RAdam {
    pub fn new(cfg: RAdamConfig) -> Self {
        Self {
            cfg,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> RAdamConfig {
        self.cfg
    }

    /// Computes the update for one parameter in place.
    pub fn update(cfg: &RAdamConfig, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let t = step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let b2t = b2.powi(t);
        let bc2 = 1.0 - b2t;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * step as f64 * b2t / bc2;
        let rect = if rho_t > 5.0 {
            Some(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt())
        } else {
            None
        };
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            p[i] -= match rect {
                Some(r) => lr * m_hat * r * bc2.sqrt() / (v[i].sqrt() + cfg.eps),
                None => lr * m_hat,
            };
        }
    }

    /// One update of every parameter in `params` that has a gradient.
    /// `clip` rescales gradients to that global norm when exceeded.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, lr: f64, clip: Option<f64>) -> Result<()> {
        let mut host = Vec::new();
        for (name, var) in params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                host.push((name, var, g));
            }
        }
        if let Some(max_norm) = clip {
            let norm = host.iter().flat_map(|(_, _, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
            if norm > max_norm {
                let s = max_norm / norm;
                host.iter_mut().for_each(|(_, _, g)| g.iter_mut().for_each(|x| *x *= s));
            }
        }
        for (name, var, g) in host {
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                step: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if slot.m.len() != g.len() {
                return Err(Error::Contract(format!("optimizer state for `{name}` has the wrong size")));
            }
            slot.step += 1;
            let mut p = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            Self::update(&self.cfg, &mut p, &g, &mut slot.m, &mut slot.v, slot.step, lr);
            let t = Tensor::from_vec(p, var.dims(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Moments and step counts as named tensors (`<param>.m`, `.v`, `.step`).
    pub fn state_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, s) in &self.slots {
            out.insert(format!("{name}.m"), Tensor::new(s.m.as_slice(), &Device::Cpu)?);
            out.insert(format!("{name}.v"), Tensor::new(s.v.as_slice(), &Device::Cpu)?);
            out.insert(format!("{name}.step"), Tensor::new(&[s.step as f64], &Device::Cpu)?);
        }
        Ok(out)
    }

    pub fn load_state(cfg: RAdamConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (key, t) in tensors {
            let Some(name) = key.strip_suffix(".step") else {
                continue;
            };
            let fetch = |suffix: &str| -> Result<Vec<f64>> {
                let t = tensors
                    .get(&format!("{name}.{suffix}"))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{name}.{suffix}`")))?;
                Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
            };
            let step = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let step = *step
                .first()
                .ok_or_else(|| Error::Checkpoint(format!("empty step entry for `{name}`")))?;
            slots.insert(
                name.to_string(),
                Slot {
                    step: step as u64,
                    m: fetch("m")?,
                    v: fetch("v")?,
                },
            );
        }
        Ok(Self { cfg, slots })
    }
}
