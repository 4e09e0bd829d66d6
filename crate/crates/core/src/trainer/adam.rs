use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Bias-corrected Adam update at step `t` (1-based) of the parameters
    /// stored at `offset..offset + params.len()`. `lr` maps a local index to
    /// its learning rate.
    pub fn step(&mut self, offset: usize, params: &mut [f64], grads: &[f64], t: u64, lr: impl Fn(usize) -> f64) {
        debug_assert_eq!(params.len(), grads.len());
        let end = offset + params.len();
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let moments = self.m[offset..end].iter_mut().zip(self.v[offset..end].iter_mut());
        for (i, ((p, &g), (m, v))) in params.iter_mut().zip(grads).zip(moments).enumerate() {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr(i) * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}
