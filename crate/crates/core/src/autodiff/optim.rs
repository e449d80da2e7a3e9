use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the store's gradients, which are
    /// zeroed afterwards. Non-finite gradients abort without touching the
    /// parameters.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer sized for {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some(i) = store.grad().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i} at optimizer step {}", self.step + 1)));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (params, grads) = store.params_and_grads();
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            grads[i] = 0.0;
        }
        Ok(())
    }
}

/// Cosine decay from `lr_start` at `step = 0` to `lr_end` at `step = total`.
pub fn cosine_lr(step: usize, total: usize, lr_start: f64, lr_end: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs total > 0".into()));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond schedule length {total}")));
    }
    let frac = step as f64 / total as f64;
    Ok(lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = ParamStore::new();
        s.alloc("p", 3).unwrap();
        s.flat_mut().copy_from_slice(&[1.0, -2.0, 3.0]);
        let mut adam = Adam::new(3);
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.flat(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut s = ParamStore::new();
        s.alloc("p", 2).unwrap();
        let mut adam = Adam::new(2);
        for _ in 0..50 {
            s.grad_mut().copy_from_slice(&[2.0, -0.5]);
            adam.step(&mut s, 1e-2).unwrap();
            assert_eq!(s.grad(), &[0.0, 0.0]);
        }
        assert!(s.flat()[0] < -0.4 && s.flat()[1] > 0.4);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let center = [1.0, -1.0, 0.5];
        let scales = [1.0, 4.0, 0.25];
        let loss = |p: &[f64]| -> f64 { p.iter().zip(&center).zip(&scales).map(|((x, c), s)| s * (x - c).powi(2)).sum() };
        let mut s = ParamStore::new();
        s.alloc("p", 3).unwrap();
        let initial = loss(s.flat());
        let mut adam = Adam::new(3);
        for _ in 0..500 {
            let g: Vec<f64> = s.flat().iter().zip(&center).zip(&scales).map(|((x, c), s)| 2.0 * s * (x - c)).collect();
            s.grad_mut().copy_from_slice(&g);
            adam.step(&mut s, 1e-2).unwrap();
        }
        assert!(loss(s.flat()) < 1e-4 * initial, "{}", loss(s.flat()));
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut s = ParamStore::new();
        s.alloc("p", 2).unwrap();
        s.grad_mut()[1] = f64::NAN;
        assert!(matches!(Adam::new(2).step(&mut s, 1e-3), Err(Error::NonFinite(_))));
        assert_eq!(s.flat(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 1000, 5e-4, 1e-8).unwrap(), 5e-4);
        assert!((cosine_lr(1000, 1000, 5e-4, 1e-8).unwrap() - 1e-8).abs() < 1e-20);
        assert!((cosine_lr(500, 1000, 5e-4, 1e-8).unwrap() - (5e-4 + 1e-8) / 2.0).abs() < 1e-18);
        assert!(cosine_lr(0, 0, 5e-4, 1e-8).is_err());
        assert!(cosine_lr(11, 10, 5e-4, 1e-8).is_err());
    }
}
