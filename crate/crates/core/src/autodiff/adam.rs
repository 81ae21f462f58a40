use super::params::{Param, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(lr: T) -> Self {
        AdamState { lr, beta1: T::lit(0.9), beta2: T::lit(0.999), eps: T::lit(1e-8), t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(lr: T, t: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Self {
        AdamState { t, m, v, ..Self::new(lr) }
    }

    /// One update of every parameter selected by `active`, then clears all
    /// gradients. A selected trainable parameter without a gradient is an
    /// error: the caller forgot a backward pass or the parameter is
    /// disconnected from the loss.
    pub fn step(&mut self, store: &mut ParamStore<T>, active: impl Fn(&Param<T>) -> bool) -> Result<()> {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| vec![T::zero(); p.value().len()]).collect();
            self.v = self.m.clone();
        }
        let selected: Vec<_> = store.ids().filter(|&id| {
            let p = store.get(id);
            p.trainable && active(p)
        }).collect();
        if let Some(&id) = selected.iter().find(|&&id| !store.get(id).has_grad()) {
            return Err(Error::State(format!("parameter {} has no gradient", store.get(id).name)));
        }

        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for id in selected {
            let (values, grads) = ParamStore::split_mut(store.param_mut(id));
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] = values[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Convenience for tests and small problems: a single tensor optimized in isolation.
pub fn adam_minimize<T: Real>(
    start: Tensor<T>,
    lr: T,
    steps: usize,
    mut grad: impl FnMut(&Tensor<T>) -> Tensor<T>,
) -> Tensor<T> {
    use super::params::ParamGroup;
    let mut store = ParamStore::new();
    let id = store.add("x", ParamGroup::Backend, start);
    let mut opt = AdamState::new(lr);
    for _ in 0..steps {
        let g = grad(store.value(id));
        store.param_mut(id).set_grad(g.data());
        opt.step(&mut store, |_| true).expect("gradient set");
    }
    store.value(id).clone()
}
