use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamStep {
    Applied,
    /// The gradient had a NaN or infinite entry; nothing was changed.
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(num_params: usize, config: AdamConfig) -> Self {
        AdamState { config, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// Panics if the slices do not match the state size.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> AdamStep {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient size mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            log::warn!("skipping Adam step {}: non-finite gradient", self.step + 1);
            return AdamStep::SkippedNonFinite;
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        AdamStep::Applied
    }
}
