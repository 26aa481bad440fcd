//! Decoupled-weight-decay Adam over a fixed parameter enumeration.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay. Moment buffers are laid out per
/// parameter in enumeration order; the same order must be used on every
/// step.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: Option<Vec<Moment>>,
}

struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    /// The standard configuration: betas 0.9/0.999, eps 1e-8.
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: None }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update at learning rate `lr`. `params` and `grads` must
    /// align index-for-index with each other and with every previous call.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Vec<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Config(format!(
                "{} parameters against {} gradient buffers",
                params.len(),
                grads.len()
            )));
        }
        let moments = self.moments.get_or_insert_with(|| {
            params.iter().map(|(_, t)| Moment { m: vec![0.0; t.numel()], v: vec![0.0; t.numel()] }).collect()
        });
        if moments.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state covers {} parameters, step got {}",
                moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (name, tensor)) in params.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != tensor.numel() {
                return Err(Error::shape(
                    "adamw",
                    format!("gradient for {} has {} entries, parameter has {}", name, g.len(), tensor.numel()),
                ));
            }
            let mom = &mut moments[i];
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let grad = g[j];
                if !grad.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for {} at entry {}",
                        name, j
                    )));
                }
                mom.m[j] = self.beta1 * mom.m[j] + (1.0 - self.beta1) * grad;
                mom.v[j] = self.beta2 * mom.v[j] + (1.0 - self.beta2) * grad * grad;
                let m_hat = mom.m[j] / bias1;
                let v_hat = mom.v[j] / bias2;
                *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}
