use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<T>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Vec<T>) {
        self.velocity.insert(name.into(), v);
    }

    /// Applies one update and clears every gradient. Nothing is modified if
    /// any parameter lacks a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor<T>)>) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        for (name, p) in params {
            let grad = p.grad().expect("checked above").to_vec();
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(p.data_mut()) {
                *vi = self.momentum * *vi + *gi;
                *pi -= self.lr * *vi;
            }
            p.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor<f64> {
        let mut p = Tensor::scalar(value).with_grad();
        p.accumulate_grad(&[grad]).unwrap();
        p
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 1.0);
        Sgd::new(0.1, 0.0).step([("p".to_string(), &mut p)]).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = param(1.0, 0.0);
        Sgd::new(0.1, 0.9).step([("p".to_string(), &mut p)]).unwrap();
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 1, p1 = 0.9; v2 = 0.9 + 1 = 1.9, p2 = 0.9 - 0.19 = 0.71
        let mut p = param(1.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step([("p".to_string(), &mut p)]).unwrap();
        assert!((p.item() - 0.9).abs() < 1e-12);
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step([("p".to_string(), &mut p)]).unwrap();
        assert!((p.item() - 0.71).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_an_error_and_updates_nothing() {
        let mut a = param(1.0, 1.0);
        let mut b = Tensor::scalar(2.0).with_grad();
        let err = Sgd::new(0.1, 0.0)
            .step([("a".to_string(), &mut a), ("b".to_string(), &mut b)])
            .unwrap_err();
        assert!(matches!(err, Error::MissingGrad(ref n) if n == "b"));
        assert_eq!(a.item(), 1.0);
    }
}
