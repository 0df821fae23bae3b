//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moments, one buffer per parameter in store order.
    pub m: Vec<Vec<f32>>,
    /// Second moments.
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Apply one update from each parameter's `grad`, then clear the grads.
    /// Nothing is modified if any parameter lacks a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            )));
        }
        for ((name, t), m) in params.iter().zip(&self.m) {
            match &t.grad {
                None => return Err(Error::Training(format!("parameter {name:?} has no gradient"))),
                Some(g) if g.len() != t.len() || m.len() != t.len() => {
                    return Err(Error::Training(format!("gradient of {name:?} does not match its shape")))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((_, p), m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.take().expect("checked above");
            let w = p.data_mut();
            for i in 0..w.len() {
                let gi = g[i] as f64;
                let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                w[i] = (w[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full((1, 1, 1, 1), w).unwrap()).unwrap();
        s
    }

    #[test]
    fn single_step_closed_form() {
        let mut p = scalar_store(0.0);
        let mut adam = AdamState::new(0.1, &p);
        p.iter_mut().next().unwrap().1.grad = Some(vec![1.0]);
        adam.step(&mut p).unwrap();
        let w = p.get("w").unwrap().data()[0] as f64;
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-7, "{w}");
        assert_eq!(adam.step, 1);
        assert!(p.get("w").unwrap().grad.is_none());
    }

    #[test]
    fn zero_grad_and_zero_lr_leave_params() {
        let mut p = scalar_store(0.7);
        let mut adam = AdamState::new(0.1, &p);
        p.iter_mut().next().unwrap().1.grad = Some(vec![0.0]);
        adam.step(&mut p).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);

        let mut adam = AdamState::new(0.0, &p);
        for k in 0..20 {
            p.iter_mut().next().unwrap().1.grad = Some(vec![k as f32 - 3.0]);
            adam.step(&mut p).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.7);
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let mut adam = AdamState::new(0.1, &p);
        let err = adam.step(&mut p).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
        assert!(err.to_string().contains("\"w\""));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn matches_reference_over_steps() {
        let grads = [0.3f64, -1.2, 0.5, 2.0, -0.1];
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (0.5f64, 0.0, 0.0);
        let mut p = scalar_store(0.5);
        let mut adam = AdamState::new(lr, &p);
        for (k, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let t = (k + 1) as i32;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            p.iter_mut().next().unwrap().1.grad = Some(vec![*g as f32]);
            adam.step(&mut p).unwrap();
        }
        assert!((p.get("w").unwrap().data()[0] as f64 - w).abs() < 1e-6);
    }
}
