//! First-order optimizers over flat parameter views.

use crate::params::{GradientVector, ParamError, ParameterStore};

/// `theta - lr * grad` for every tensor in the gradient's layout. Returns a
/// new store; the input is left untouched.
pub fn sgd_step(
    params: &ParameterStore,
    grad: &GradientVector,
    lr: f64,
) -> Result<ParameterStore, ParamError> {
    let names: Vec<String> = grad.layout().iter().map(|s| s.name.clone()).collect();
    let theta = params.flatten(&names)?;
    if !theta.same_layout(grad) {
        return Err(ParamError::LayoutMismatch);
    }
    let values = theta
        .values()
        .iter()
        .zip(grad.values())
        .map(|(t, g)| t - lr * g)
        .collect();
    let mut out = params.clone();
    out.assign(&theta.with_values(values)?)?;
    Ok(out)
}

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn standard() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.0)
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self::new(0.9, 0.999, 1e-8, weight_decay)
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// One update at learning rate `lr`. The moment buffers are sized on the
    /// first call; later gradients must have the same length.
    pub fn step(
        &mut self,
        params: &ParameterStore,
        grad: &GradientVector,
        lr: f64,
    ) -> Result<ParameterStore, ParamError> {
        let names: Vec<String> = grad.layout().iter().map(|s| s.name.clone()).collect();
        let theta = params.flatten(&names)?;
        if !theta.same_layout(grad) {
            return Err(ParamError::LayoutMismatch);
        }
        if self.m.is_empty() {
            self.m = vec![0.0; grad.len()];
            self.v = vec![0.0; grad.len()];
        }
        if self.m.len() != grad.len() {
            return Err(ParamError::Length {
                expected: self.m.len(),
                actual: grad.len(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let mut values = Vec::with_capacity(grad.len());
        for (i, (&th, &g)) in theta.values().iter().zip(grad.values()).enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values.push(th * decay - lr * m_hat / (v_hat.sqrt() + self.eps));
        }
        let mut out = params.clone();
        out.assign(&theta.with_values(values)?)?;
        Ok(out)
    }
}

/// Half-cosine decay from `base` to zero over `periods`, evaluated at the
/// start of period `index`.
pub fn cosine_lr(base: f64, index: usize, periods: usize) -> f64 {
    if periods == 0 {
        return base;
    }
    let t = index.min(periods) as f64 / periods as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
