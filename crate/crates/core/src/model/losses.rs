use serde::{Deserialize, Serialize};

use super::network::ForwardOutput;
use super::ModelError;
use crate::numerics::{Graph, Real, Tensor, Var};

/// `L = lambda_c L_c + lambda_h L_h + lambda_g L_g`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_h: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_c: 0.8, lambda_h: 100.0, lambda_g: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), ModelError> {
        let w = [self.lambda_c, self.lambda_h, self.lambda_g];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::InvalidConfig(format!("loss weights must be finite and non-negative, got {w:?}")));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(ModelError::InvalidConfig("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    /// Combines already-evaluated component losses.
    pub fn total(&self, c: f64, h: f64, g: f64) -> f64 {
        self.lambda_c * c + self.lambda_h * h + self.lambda_g * g
    }
}

/// Supervision for a batch.
#[derive(Debug, Clone)]
pub struct Targets<F> {
    /// `[B, T, g, g]` normalized vulnerability targets.
    pub d_hat: Tensor<F>,
    /// `[B, T]` soft labels.
    pub p: Tensor<F>,
    /// `[B]` clip labels, 1 for fake.
    pub y: Tensor<F>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub c: Var,
    pub h: Var,
    pub g: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub c: f64,
    pub h: f64,
    pub g: f64,
}

impl LossVars {
    pub fn values<F: Real>(&self, graph: &Graph<F>) -> LossValues {
        let v = |x: Var| graph.value(x).data()[0].as_f64();
        LossValues { total: v(self.total), c: v(self.c), h: v(self.h), g: v(self.g) }
    }
}

/// Classification BCE, temporal-head MSE and soft-label BCE, weighted.
pub fn losses<F: Real>(
    graph: &mut Graph<F>,
    out: &ForwardOutput<F>,
    targets: &Targets<F>,
    weights: &LossWeights,
) -> Result<LossVars, ModelError> {
    weights.validate()?;
    let check = |name: &str, got: &[usize], want: &[usize]| {
        if got != want {
            return Err(ModelError::ShapeMismatch(format!("{name} target {got:?}, head output {want:?}")));
        }
        Ok(())
    };
    check("d_hat", targets.d_hat.shape(), graph.shape(out.d_tilde))?;
    check("p", targets.p.shape(), graph.shape(out.p_logits))?;
    check("y", targets.y.shape(), graph.shape(out.y_logit))?;
    let c = graph.bce_with_logits(out.y_logit, &targets.y)?;
    let h = graph.mse(out.d_tilde, &targets.d_hat)?;
    let g = graph.bce_with_logits(out.p_logits, &targets.p)?;
    let wc = graph.scale(c, F::lit(weights.lambda_c))?;
    let wh = graph.scale(h, F::lit(weights.lambda_h))?;
    let wg = graph.scale(g, F::lit(weights.lambda_g))?;
    let total = graph.add(wc, wh)?;
    let total = graph.add(total, wg)?;
    Ok(LossVars { total, c, h, g })
}
