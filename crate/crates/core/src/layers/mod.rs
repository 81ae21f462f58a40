//! Network layers. Every layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward pass on a [`Graph`] through a
//! [`Ctx`].

use std::cell::RefCell;
use std::collections::HashMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Var};

mod backend;
mod frontend;
pub mod init;
mod lstm;
mod saaf;
mod sfir;

pub use backend::{backend_mix, envelope_upsample, DnnSaaf, SeLstm};
pub use frontend::{FrontEnd, FrontendOut};
pub use lstm::{BiLstm, Lstm, LstmCell, LstmMasks};
pub use saaf::{saaf_eval, saaf_segment, Saaf, SaafShape};
pub use sfir::{sfir_apply_dense, slot_of, SfirLayer, SparseFirSet};

/// Binds parameters onto one graph.
///
/// In inference mode every parameter is a constant, so the tape stores no
/// backward closures. Each parameter is bound at most once per graph.
pub struct Ctx<'a, T> {
    pub g: &'a Graph<T>,
    store: &'a ParamStore<T>,
    learn: bool,
    bound: RefCell<HashMap<ParamId, Var>>,
    dropout: RefCell<Option<&'a mut ChaCha8Rng>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn infer(g: &'a Graph<T>, store: &'a ParamStore<T>) -> Self {
        Ctx { g, store, learn: false, bound: RefCell::default(), dropout: RefCell::new(None) }
    }

    /// Training mode. Dropout masks are drawn from `dropout_rng` when given;
    /// without it the pass is deterministic but still differentiable.
    pub fn train(g: &'a Graph<T>, store: &'a ParamStore<T>, dropout_rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Ctx { g, store, learn: true, bound: RefCell::default(), dropout: RefCell::new(dropout_rng) }
    }

    pub fn is_training(&self) -> bool {
        self.learn
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn p(&self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.borrow().get(&id) {
            return v;
        }
        let v = if self.learn && self.store.get(id).trainable {
            self.g.param(self.store, id)
        } else {
            self.g.param_frozen(self.store, id)
        };
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Reads a parameter as a constant even in training mode.
    pub fn frozen(&self, id: ParamId) -> Var {
        self.g.param_frozen(self.store, id)
    }

    /// Inverted-dropout mask of length `n`, or `None` outside training or
    /// when `rate` is zero.
    pub fn dropout_mask(&self, n: usize, rate: f64) -> Option<Vec<T>> {
        if !self.learn || rate <= 0.0 {
            return None;
        }
        let mut slot = self.dropout.borrow_mut();
        let rng = slot.as_mut()?;
        let keep = T::lit(1.0 / (1.0 - rate));
        Some((0..n).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect())
    }
}
