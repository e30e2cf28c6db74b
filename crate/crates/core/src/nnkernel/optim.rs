use serde::{Deserialize, Serialize};

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter from its current gradient.
pub fn adam_step<'a>(params: impl IntoIterator<Item = &'a mut Param>, cfg: &AdamConfig) {
    for p in params {
        p.step += 1;
        let t = p.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let value = p.value.as_mut_slice();
        let m = p.adam_m.as_mut_slice();
        let v = p.adam_v.as_mut_slice();
        for (((w, &g), m), v) in value.iter_mut().zip(p.grad.as_slice()).zip(m).zip(v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::Matrix;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::new(Matrix::filled(1, 1, 0.5));
        p.grad.fill(1.0);
        adam_step([&mut p], &AdamConfig::with_lr(0.001));
        assert!((0.5 - p.value[(0, 0)] - 0.001).abs() < 1e-9);
        assert_eq!(p.step, 1);
    }

    #[test]
    fn zero_grad_leaves_value() {
        let mut p = Param::new(Matrix::filled(2, 2, 1.25));
        adam_step([&mut p], &AdamConfig::default());
        assert_eq!(p.value, Matrix::filled(2, 2, 1.25));
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = Param::new(Matrix::zeros(1, 1));
        let cfg = AdamConfig::with_lr(0.05);
        for _ in 0..100 {
            let w = p.value[(0, 0)];
            p.zero_grad();
            p.grad[(0, 0)] = 2.0 * (w - 2.0);
            adam_step([&mut p], &cfg);
        }
        assert!((p.value[(0, 0)] - 2.0).abs() < 0.05, "{}", p.value[(0, 0)]);
    }
}
