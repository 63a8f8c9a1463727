use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamId, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    /// Sharpness-aware minimization wrapped around momentum SGD.
    SamWrapped,
    /// Adam with decoupled weight decay; `momentum` is the first-moment decay.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub sam_rho: f64,
    /// Rescale the gradient of the updated entries to at most this global
    /// L2 norm before the momentum update; `None` leaves it untouched.
    pub max_grad_norm: Option<f64>,
    /// Second-moment decay, AdamW only.
    pub beta2: f64,
    /// Denominator offset, AdamW only.
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::SgdMomentum, lr: 5e-4, momentum: 0.9, weight_decay: 1e-4, sam_rho: 0.05, max_grad_norm: None, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |field: &str, v: f64| NumericsError::InvalidArgument(format!("optimizer.{field} = {v} is invalid"));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad("momentum", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", self.weight_decay));
        }
        if !(self.sam_rho >= 0.0 && self.sam_rho.is_finite()) {
            return Err(bad("sam_rho", self.sam_rho));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(bad("beta2", self.beta2));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(bad("eps", self.eps));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(bad("max_grad_norm", c));
            }
        }
        Ok(())
    }
}

/// Loss value plus one gradient tensor per store entry (buffers get zeros).
pub struct Evaluation<F> {
    pub loss: F,
    pub grads: Vec<Tensor<F>>,
}

/// Momentum SGD with L2 weight decay folded into the gradient, optionally
/// wrapped in the two-pass SAM update, or AdamW.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    config: OptimizerConfig,
    velocity: Vec<Option<Tensor<F>>>,
    second: Vec<Option<Tensor<F>>>,
    updates: i32,
}

impl<F: Real> Optimizer<F> {
    pub fn new(config: OptimizerConfig) -> Result<Self, NumericsError> {
        config.validate()?;
        Ok(Self { config, velocity: Vec::new(), second: Vec::new(), updates: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// `v <- mu*v + g + wd*theta; theta <- theta - lr*v` on every updatable
    /// trainable entry (AdamW: bias-corrected moments, decay applied to theta).
    pub fn apply_gradients(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[Tensor<F>],
        lr: f64,
        updatable: &dyn Fn(ParamId) -> bool,
    ) -> Result<(), NumericsError> {
        if grads.len() != store.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        let mu = F::lit(self.config.momentum);
        let wd = F::lit(self.config.weight_decay);
        let lr = F::lit(lr);
        let ids: Vec<ParamId> = store.trainable_ids().filter(|&id| updatable(id)).collect();
        if ids.iter().any(|id| !grads[id.index()].is_finite()) {
            return Err(NumericsError::NonFiniteDetected { op: "optimizer_step", phase: "update" });
        }
        let clip = match self.config.max_grad_norm {
            Some(max) => {
                let norm = ids.iter().flat_map(|id| grads[id.index()].data().iter()).map(|&g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let clip = F::lit(clip);
        if self.config.kind == OptimizerKind::AdamW {
            self.updates = self.updates.saturating_add(1);
            let (b1, b2) = (self.config.momentum, self.config.beta2);
            let c1 = F::lit(1.0 - b1.powi(self.updates));
            let c2 = F::lit(1.0 - b2.powi(self.updates));
            let (b1, b2, eps) = (F::lit(b1), F::lit(b2), F::lit(self.config.eps));
            for id in ids {
                let g = &grads[id.index()];
                let theta = store.value_mut(id);
                let m = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(theta.shape()));
                let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(theta.shape()));
                for (((mi, vi), &gi), ti) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()).zip(theta.data_mut().iter_mut()) {
                    let gi = clip * gi;
                    *mi = b1 * *mi + (F::one() - b1) * gi;
                    *vi = b2 * *vi + (F::one() - b2) * gi * gi;
                    *ti = *ti - lr * ((*mi / c1) / ((*vi / c2).sqrt() + eps) + wd * *ti);
                }
            }
            return Ok(());
        }
        for id in ids {
            let g = &grads[id.index()];
            let theta = store.value_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(theta.shape()));
            for ((vi, &gi), ti) in v.data_mut().iter_mut().zip(g.data()).zip(theta.data_mut().iter_mut()) {
                *vi = mu * *vi + clip * gi + wd * *ti;
                *ti = *ti - lr * *vi;
            }
        }
        Ok(())
    }

    /// One optimizer step. `evaluate` computes the loss and gradients at the
    /// store's current values; SAM calls it twice (at `theta`, then at the
    /// ascended point) and descends from the original `theta`.
    /// Returns the loss from the first evaluation.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        lr: f64,
        updatable: &dyn Fn(ParamId) -> bool,
        mut evaluate: impl FnMut(&ParamStore<F>) -> Result<Evaluation<F>, NumericsError>,
    ) -> Result<F, NumericsError> {
        let first = evaluate(store)?;
        match self.config.kind {
            OptimizerKind::SgdMomentum | OptimizerKind::AdamW => {
                self.apply_gradients(store, &first.grads, lr, updatable)?;
            }
            OptimizerKind::SamWrapped => {
                let ids: Vec<ParamId> = store.trainable_ids().filter(|&id| updatable(id)).collect();
                let norm = ids
                    .iter()
                    .flat_map(|id| first.grads[id.index()].data().iter())
                    .map(|&g| g.as_f64() * g.as_f64())
                    .sum::<f64>()
                    .sqrt();
                if !norm.is_finite() {
                    return Err(NumericsError::NonFiniteDetected { op: "sam_ascent", phase: "update" });
                }
                let scale = if norm > 0.0 { self.config.sam_rho / norm } else { 0.0 };
                let originals: Vec<(ParamId, Tensor<F>)> = ids.iter().map(|&id| (id, store.value(id).clone())).collect();
                for &id in &ids {
                    let g = first.grads[id.index()].clone();
                    let theta = store.value_mut(id);
                    for (t, &gi) in theta.data_mut().iter_mut().zip(g.data()) {
                        *t = *t + F::lit(scale) * gi;
                    }
                }
                let second = evaluate(store);
                for (id, value) in originals {
                    store.set(id, value)?;
                }
                let second = second?;
                self.apply_gradients(store, &second.grads, lr, updatable)?;
            }
        }
        Ok(first.loss)
    }
}
