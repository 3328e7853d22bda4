use serde::{Deserialize, Serialize};

use super::params::{GradBuffer, ParamStore};
use super::tensor::Tensor;
use crate::error::{input_err, Result};

/// Adam optimiser state with bias-corrected moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> =
            store.values().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradBuffer) -> Result<()> {
        if grads.as_slice().len() != params.len() || self.first.len() != params.len() {
            return Err(input_err!(
                "{} gradients / {} moments for {} parameters",
                grads.as_slice().len(),
                self.first.len(),
                params.len()
            ));
        }
        for (i, (p, g)) in params.values().iter().zip(grads.as_slice()).enumerate() {
            if !p.same_shape(g) || !p.same_shape(&self.first[i]) {
                return Err(input_err!(
                    "parameter {} shape {:?} vs gradient {:?}",
                    params.name(super::params::ParamId(i)),
                    p.shape(),
                    g.shape()
                ));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .values_mut()
            .iter_mut()
            .zip(grads.as_slice())
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::ParamId;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(value));
        s
    }

    fn grad_of(store: &ParamStore, g: f64) -> GradBuffer {
        let mut b = GradBuffer::zeros_like(store);
        b.get_mut(ParamId(0)).data_mut()[0] = g;
        b
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = single(1.25);
        let mut adam = AdamState::new(&s, 1e-3);
        for _ in 0..10 {
            let g = grad_of(&s, 0.0);
            adam.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get(ParamId(0)).item(), 1.25);
        assert_eq!(adam.step_count(), 10);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut s = single(0.0);
        let lr = 0.01;
        let mut adam = AdamState::new(&s, lr);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = s.get(ParamId(0)).item();
            let g = grad_of(&s, 3.0);
            adam.step(&mut s, &g).unwrap();
            last = s.get(ParamId(0)).item() - before;
        }
        assert!((last + lr).abs() < 1e-6, "last step {last}");
    }

    #[test]
    fn minimises_quadratic() {
        let mut s = single(1.0);
        let mut adam = AdamState::new(&s, 0.01);
        let mut reached = None;
        for step in 1..=500 {
            let x = s.get(ParamId(0)).item();
            let g = grad_of(&s, 2.0 * x);
            adam.step(&mut s, &g).unwrap();
            if s.get(ParamId(0)).item().abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", s.get(ParamId(0)).item());
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let mut s = single(1.0);
        let mut adam = AdamState::new(&s, 0.01);
        let mut other = ParamStore::new();
        other.insert("x", Tensor::zeros(2, 2));
        let g = GradBuffer::zeros_like(&other);
        assert!(matches!(adam.step(&mut s, &g), Err(crate::Error::Input(_))));
    }
}
