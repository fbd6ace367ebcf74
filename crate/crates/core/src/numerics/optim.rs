use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adaptive-moment optimizer with decoupled weight decay.
///
/// Updates are lazy: a parameter whose accumulated gradient is exactly zero
/// is skipped, including its moments, step count, and decay. Per-morphology
/// heads that did not take part in a batch therefore stay untouched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    /// Applies one update from the store's gradient buffers, which are read
    /// but never written. Fails before touching anything if a gradient is
    /// non-finite.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if !store.grad(id).is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        for id in ids {
            let (_, value, grad, mom) = store.parts_mut(id);
            if grad.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            mom.step += 1;
            let t = mom.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            for (((p, &g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(mom.m.iter_mut())
                .zip(mom.v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new("p");
        s.register("x", Tensor::scalar(v)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        let id = s.ids().next().unwrap();
        let mut graph = Graph::new();
        let p = graph.param(s, id);
        let l = graph.scale(p, g);
        let grads = graph.backward(l).unwrap();
        s.zero_grad();
        s.accumulate(&grads);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        Adam::new(1e-3).step(&mut s).unwrap();
        assert_eq!(s.value(s.ids().next().unwrap()).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.0);
        set_grad(&mut s, 1.0);
        Adam::new(1e-4).step(&mut s).unwrap();
        let x = s.value(s.ids().next().unwrap()).item();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        assert!((x + 1e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn gradients_survive_the_step() {
        let mut s = scalar_store(1.0);
        set_grad(&mut s, 0.5);
        Adam::new(1e-2).step(&mut s).unwrap();
        assert_eq!(s.grad(s.ids().next().unwrap()).item(), 0.5);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        set_grad(&mut s, f64::NAN);
        let err = Adam::new(1e-2).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("p/x"));
        assert_eq!(s.value(s.ids().next().unwrap()).item(), 1.0);
    }
}
