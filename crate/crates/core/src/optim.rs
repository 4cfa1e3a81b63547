//! SGD with momentum and weight decay, and the cosine learning-rate schedule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Scalar;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-4;
pub const DEFAULT_LR_MAX: f64 = 0.2;
pub const DEFAULT_LR_MIN: f64 = 0.002;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/T))` for `0 ≤ t ≤ T`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule needs at least one step (T = 0)"));
    }
    if t > total {
        return Err(Error::invalid(format!("step {t} is past the schedule end {total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Momentum SGD state: one velocity buffer per trainable parameter.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// `v ← m·v − lr·(g + wd·θ)`, `θ ← θ + v`, then clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) {
        let lr = T::from_f64_lossy(lr);
        let m = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        for p in store.iter_mut().filter(|p| p.trainable) {
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); p.grad.len()]);
            for ((theta, g), vel) in p.value.data_mut().iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vel = m * *vel - lr * (*g + wd * *theta);
                *theta += *vel;
            }
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

/// One momentum-SGD update of every trainable parameter in `store`.
pub fn sgd_momentum_step<T: Scalar>(
    store: &mut ParamStore<T>,
    state: &mut Sgd<T>,
    lr: f64,
) {
    state.step(store, lr);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Parameter;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 100, 0.2, 0.002).unwrap() - 0.2).abs() < 1e-15);
        assert!((cosine_lr(100, 100, 0.2, 0.002).unwrap() - 0.002).abs() < 1e-15);
        assert!((cosine_lr(50, 100, 0.2, 0.002).unwrap() - 0.101).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.2, 0.002).is_err());
        assert!(cosine_lr(5, 4, 0.2, 0.002).is_err());
    }

    #[test]
    fn cosine_is_monotone() {
        let lrs: Vec<f64> = (0..=20).map(|t| cosine_lr(t, 20, 0.2, 0.002).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut store = ParamStore::<f64>::new();
        let t = Tensor::new(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]).unwrap();
        let id = store.insert(Parameter::new("p", t, vec![2], true).unwrap()).unwrap();
        let frozen = Tensor::new(Shape::new(1, 1, 1, 1), vec![5.0]).unwrap();
        store.insert(Parameter::new("stat", frozen, vec![1], false).unwrap()).unwrap();
        let mut sgd = Sgd::new(0.9, 1e-4);

        store.get_mut(id).grad = vec![0.5, 0.5];
        sgd_momentum_step(&mut store, &mut sgd, 0.1);
        let v1 = [-0.1 * (0.5 + 1e-4 * 1.0), -0.1 * (0.5 + 1e-4 * -2.0)];
        let p1 = [1.0 + v1[0], -2.0 + v1[1]];
        assert_eq!(store.get(id).value.data(), &p1);
        assert_eq!(store.get(id).grad, vec![0.0, 0.0]);

        store.get_mut(id).grad = vec![1.0, 0.0];
        sgd.step(&mut store, 0.05);
        let v2 = [0.9 * v1[0] - 0.05 * (1.0 + 1e-4 * p1[0]), 0.9 * v1[1] - 0.05 * (1e-4 * p1[1])];
        let got = store.get(id).value.data();
        assert!((got[0] - (p1[0] + v2[0])).abs() < 1e-15);
        assert!((got[1] - (p1[1] + v2[1])).abs() < 1e-15);
        assert_eq!(store.by_name("stat").unwrap().value.data(), &[5.0]);
    }
}
