use super::{Scalar, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F = f32> {
    pub m: Vec<F>,
    pub v: Vec<F>,
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<F = f32> {
    pub config: AdamConfig,
    step_count: u64,
    states: Vec<AdamState<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            states: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn states(&self) -> &[AdamState<F>] {
        &self.states
    }

    /// One update of every parameter from its accumulated gradient. A
    /// parameter without a gradient is treated as having a zero gradient.
    /// Gradients are cleared afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor<F>]) -> Result<()> {
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|p| AdamState {
                    m: vec![F::zero(); p.len()],
                    v: vec![F::zero(); p.len()],
                })
                .collect();
        }
        if self.states.len() != params.len() {
            return invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.states.len(),
                params.len()
            ));
        }
        for (p, s) in params.iter().zip(&self.states) {
            if s.m.len() != p.len() {
                return invalid(format!(
                    "parameter of {} elements does not match optimizer state of {}",
                    p.len(),
                    s.m.len()
                ));
            }
            if let Some(g) = p.grad() {
                if g.len() != p.len() {
                    return invalid("gradient shape does not match parameter");
                }
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c = self.config;
        let b1 = F::from_f64(c.beta1);
        let b2 = F::from_f64(c.beta2);
        let one = F::one();
        let bc1 = F::from_f64(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64(1.0 - c.beta2.powi(t));
        let lr = F::from_f64(c.lr);
        let eps = F::from_f64(c.eps);

        for (p, s) in params.iter_mut().zip(self.states.iter_mut()) {
            let grad = p.grad().map(<[F]>::to_vec);
            let values = p.values_mut();
            for i in 0..values.len() {
                let g = grad.as_ref().map_or(F::zero(), |g| g[i]);
                s.m[i] = b1 * s.m[i] + (one - b1) * g;
                s.v[i] = b2 * s.v[i] + (one - b2) * g * g;
                let m_hat = s.m[i] / bc1;
                let v_hat = s.v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
