//! Binding between a [`ParamStore`] and one [`Tape`].
//!
//! A session lazily mirrors named parameters onto a tape as leaves (at
//! most once each), remembers which leaf belongs to which name, and
//! after a backward pass routes the leaf gradients back into the store
//! by name.  Gradient checks can substitute an arbitrary tape node for
//! a named parameter via [`Session::set_override`].
//!
//! A session's bindings are node ids into one specific tape, so every
//! fresh [`Tape`] needs a fresh session.

use std::collections::BTreeMap;

use crate::diffcore::params::ParamStore;
use crate::diffcore::tape::{Gradients, Tape, Var};
use crate::error::Result;

#[derive(Default)]
pub struct Session {
    train: bool,
    bound: BTreeMap<String, Var>,
    overrides: BTreeMap<String, Var>,
}

impl Session {
    /// `train = true` marks trainable parameters as gradient leaves;
    /// `false` binds everything as constants (evaluation graphs).
    pub fn new(train: bool) -> Self {
        Session {
            train,
            bound: BTreeMap::new(),
            overrides: BTreeMap::new(),
        }
    }

    /// Forces `name` to resolve to an existing tape node instead of the
    /// stored tensor.
    pub fn set_override(&mut self, name: &str, var: Var) {
        self.overrides.insert(name.to_string(), var);
    }

    /// The tape node for a named parameter, binding it on first use.
    pub fn param(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.overrides.get(name) {
            return Ok(*v);
        }
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = store.get(name)?;
        let v = tape.leaf(p.value.clone(), self.train && p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Accumulates the gradients of every bound parameter into the
    /// store.  Overridden names are skipped (their gradient belongs to
    /// the caller's substitute node).
    pub fn apply_gradients(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        for (name, var) in &self.bound {
            if let Some(g) = grads.wrt(*var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    #[test]
    fn binds_once_and_routes_gradients() {
        let mut store = ParamStore::new();
        store.add_tensor("w", Tensor::vector(&[2.0, 3.0]), true).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(true);
        let w1 = sess.param(&mut tape, &store, "w").unwrap();
        let w2 = sess.param(&mut tape, &store, "w").unwrap();
        assert_eq!(w1, w2);
        let p = tape.mul(w1, w2).unwrap(); // w², dw = 2w
        let out = tape.sum_elems(p);
        let grads = tape.backward(out).unwrap();
        sess.apply_gradients(&grads, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[4.0, 6.0]);
    }

    #[test]
    fn eval_session_binds_constants() {
        let mut store = ParamStore::new();
        store.add_tensor("w", Tensor::vector(&[1.0]), true).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(false);
        let w = sess.param(&mut tape, &store, "w").unwrap();
        assert!(!tape.requires_grad(w));
    }

    #[test]
    fn override_replaces_the_stored_tensor() {
        let mut store = ParamStore::new();
        store.add_tensor("w", Tensor::vector(&[5.0]), true).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(true);
        let substitute = tape.leaf(Tensor::vector(&[7.0]), true);
        sess.set_override("w", substitute);
        let w = sess.param(&mut tape, &store, "w").unwrap();
        assert_eq!(tape.value(w).data(), &[7.0]);
        // apply_gradients must not touch the store for overridden names.
        let out = tape.sum_elems(w);
        let grads = tape.backward(out).unwrap();
        sess.apply_gradients(&grads, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad.data(), &[0.0]);
    }
}
