use std::collections::{BTreeMap, HashSet};

use super::params::{Gradients, ParamId, ParamStore};
use super::{invalid, Result, Tensor, TensorError};

/// Stochastic gradient descent with heavy-ball momentum and L2 decay:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid("sgd", format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid("sgd", format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(invalid("sgd", format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update to every parameter with a gradient, skipping
    /// `frozen`. Nothing is written if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, frozen: &HashSet<ParamId>) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(store.name(id).to_string()));
            }
            if store.get(id).shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    left: store.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        for (id, g) in grads.iter() {
            if frozen.contains(&id) {
                continue;
            }
            let param = store.get_mut(id);
            let v = self
                .velocity
                .entry(id)
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((v, p), g) in v.data_mut().iter_mut().zip(param.data_mut()).zip(g.data()) {
                *v = self.momentum * *v + g + self.weight_decay * *p;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f32) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::full(&[3], v)).unwrap();
        (s, id)
    }

    fn grads(id: ParamId, g: f32) -> Gradients {
        let mut out = Gradients::new();
        out.accumulate(id, &Tensor::full(&[3], g));
        out
    }

    #[test]
    fn plain_step_moves_by_lr_times_grad() {
        let (mut s, id) = one_param(1.0);
        let mut opt = Sgd::new(0.5, 0.0, 0.0).unwrap();
        opt.step(&mut s, &grads(id, 0.25), &HashSet::new()).unwrap();
        assert_eq!(s.get(id).data(), &[0.875; 3]);
    }

    #[test]
    fn zero_grad_zero_velocity_is_noop() {
        let (mut s, id) = one_param(0.3);
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        opt.step(&mut s, &grads(id, 0.0), &HashSet::new()).unwrap();
        assert_eq!(s.get(id).data(), &[0.3; 3]);
    }

    #[test]
    fn momentum_two_steps_unrolled() {
        // v1 = g, v2 = 0.9 g + g, total displacement lr * g * (1 + 1.9).
        let (mut s, id) = one_param(0.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        let g = grads(id, 2.0);
        opt.step(&mut s, &g, &HashSet::new()).unwrap();
        opt.step(&mut s, &g, &HashSet::new()).unwrap();
        let want = -0.1 * 2.0 * (1.0 + 1.9);
        for v in s.get(id).data() {
            assert!((v - want).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_rejected_without_writes() {
        let (mut s, id) = one_param(1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        let err = opt.step(&mut s, &grads(id, f32::NAN), &HashSet::new()).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient(_)));
        assert_eq!(s.get(id).data(), &[1.0; 3]);
    }

    #[test]
    fn frozen_params_untouched() {
        let (mut s, id) = one_param(1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut s, &grads(id, 1.0), &HashSet::from([id])).unwrap();
        assert_eq!(s.get(id).data(), &[1.0; 3]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Sgd::new(0.0, 0.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 1.0, 0.0).is_err());
        assert!(Sgd::new(0.1, 0.5, -1.0).is_err());
    }
}
