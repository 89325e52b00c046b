//! AdamW with decoupled weight decay.

use crate::error::{NumericsError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

impl AdamW {
    /// One update. Parameters whose gradient is `None` are left untouched,
    /// including their weight decay.
    pub fn step(&self, params: &mut [Tensor], grads: &[Option<Tensor>], state: &mut OptimizerState) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(NumericsError::Invalid(format!(
                "adamw: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                p.same_shape(g, "adamw")?;
            }
            p.same_shape(&state.m[i], "adamw")?;
        }

        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = state.m[i].data_mut();
            let v = state.v[i].data_mut();
            for (k, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gv;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let decay = self.lr * self.weight_decay * *pv;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps) + decay;
            }
        }
        Ok(())
    }
}
