//! First-order optimizers with per-parameter state that follows rank growth.

use std::collections::BTreeMap;

use alora_autodiff::{Float, GradientMap, Param, ParamId, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{AloraError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Fraction of the planned steps spent ramping the learning rate up linearly.
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adaptive,
            lr: 3e-3,
            warmup_frac: 0.05,
            batch_size: 16,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AloraError::config("optim.lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(AloraError::config("optim.warmup_frac", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(AloraError::config("optim.batch_size", "must be positive"));
        }
        for (field, v) in [
            ("optim.momentum", self.momentum),
            ("optim.beta1", self.beta1),
            ("optim.beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(AloraError::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(AloraError::config("optim.eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    shape: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Slot {
    fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Carries state over to a grown parameter. A 2-D parameter that gained
    /// columns keeps each row's prefix; anything else keeps the flat prefix.
    /// New entries start at zero.
    fn resize(&mut self, shape: &[usize]) {
        if self.shape == shape {
            return;
        }
        let old = std::mem::replace(self, Slot::zeros(shape));
        let grew_cols = old.shape.len() == 2
            && shape.len() == 2
            && old.shape[0] == shape[0]
            && old.shape[1] <= shape[1];
        let grew_flat = old.shape.len() == shape.len()
            && old.shape[1..] == shape[1..]
            && old.shape.first() <= shape.first();
        if grew_cols {
            let (rows, oc, nc) = (shape[0], old.shape[1], shape[1]);
            for i in 0..rows {
                self.m[i * nc..i * nc + oc].copy_from_slice(&old.m[i * oc..(i + 1) * oc]);
                self.v[i * nc..i * nc + oc].copy_from_slice(&old.v[i * oc..(i + 1) * oc]);
            }
        } else if grew_flat {
            self.m[..old.m.len()].copy_from_slice(&old.m);
            self.v[..old.v.len()].copy_from_slice(&old.v);
        }
    }
}

/// SGD with momentum or an Adam-style adaptive-moment update.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    warmup_steps: u64,
    step: u64,
    slots: BTreeMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimConfig, planned_steps: u64) -> Self {
        let warmup_steps = (config.warmup_frac * planned_steps as f64).round() as u64;
        Self {
            config,
            warmup_steps,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate of the next step.
    pub fn current_lr(&self) -> f64 {
        let t = self.step + 1;
        if t <= self.warmup_steps {
            self.config.lr * t as f64 / self.warmup_steps as f64
        } else {
            self.config.lr
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step<'a, S: Float + 'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Param<S>>,
        grads: &GradientMap<S>,
    ) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let c = self.config.clone();
        for p in params {
            let Some(g) = grads.get(p.id) else { continue };
            if !p.requires_grad {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(AloraError::Contract(format!(
                    "gradient for parameter {} has shape {:?}, parameter has {:?}",
                    p.id.0,
                    g.shape(),
                    p.value.shape()
                )));
            }
            let slot = self
                .slots
                .entry(p.id)
                .or_insert_with(|| Slot::zeros(p.value.shape()));
            slot.resize(p.value.shape());
            let w = p.value.data_mut();
            match c.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, &g), m) in w.iter_mut().zip(g.data()).zip(&mut slot.m) {
                        *m = c.momentum * *m + g.as_f64();
                        *w = S::lit(w.as_f64() - lr * *m);
                    }
                }
                OptimizerKind::Adaptive => {
                    let bc1 = 1.0 - c.beta1.powf(t);
                    let bc2 = 1.0 - c.beta2.powf(t);
                    for (((w, &g), m), v) in w
                        .iter_mut()
                        .zip(g.data())
                        .zip(&mut slot.m)
                        .zip(&mut slot.v)
                    {
                        let g = g.as_f64();
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                        *w = S::lit(w.as_f64() - update);
                    }
                }
            }
            if !w.iter().all(|x| x.is_finite()) {
                return Err(AloraError::Numeric(format!(
                    "parameter {} became non-finite",
                    p.id.0
                )));
            }
        }
        Ok(())
    }

    /// First-moment state of a parameter, if it has been updated.
    pub fn first_moment<S: Float>(&self, id: ParamId) -> Option<Tensor<S>> {
        self.slots.get(&id).map(|s| {
            Tensor::new(
                s.shape.clone(),
                s.m.iter().map(|&x| S::lit(x)).collect(),
            )
            .expect("slot shape matches its data")
        })
    }
}
