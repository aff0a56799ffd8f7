//! Named parameter store with a frozen/trainable partition.
//!
//! The store is the single owner of every model tensor. Forward passes
//! bind it onto a tape (trainable entries as differentiable leaves, frozen
//! entries as constants); the optimizer and checkpointing walk it by name.

use indexmap::IndexMap;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{invalid_input, Result};
use crate::tape::{Grads, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Frozen,
    Trainable,
}

/// Index of a parameter within its store. Stable for a fixed construction
/// order, which model building guarantees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Entry<T> {
    role: Role,
    tensor: Tensor<T>,
}

pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn register(&mut self, name: &str, role: Role, tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.entries.contains_key(name),
            "parameter {name:?} registered twice"
        );
        self.entries.insert(name.to_string(), Entry { role, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).unwrap().0
    }

    pub fn role(&self, id: ParamId) -> Role {
        self.entries[id.0].role
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.role(id) == Role::Trainable).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Role, &Tensor<T>)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e.role, &e.tensor))
    }

    /// Replace a tensor by name, keeping its role. Shape must match.
    pub fn set_by_name(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| invalid_input(format!("unknown parameter {name:?}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(invalid_input(format!(
                "parameter {name:?}: shape {:?} cannot replace {:?}",
                tensor.shape(),
                entry.tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    /// SHA-256 over (name, shape, f32 bytes) of entries matching `role`
    /// (all entries when `role` is None). Store order is construction order.
    pub fn digest(&self, role: Option<Role>) -> String {
        let mut h = Sha256::new();
        for (name, entry) in &self.entries {
            if role.is_some_and(|r| r != entry.role) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for &dim in entry.tensor.shape() {
                h.update((dim as u64).to_le_bytes());
            }
            h.update(entry.tensor.to_f32_le_bytes());
        }
        hex_string(&h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, entry) in &self.entries {
            out.register(name, entry.role, entry.tensor.cast());
        }
        out
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// A store bound onto a tape: one leaf per parameter, trainable entries
/// differentiable, frozen entries constant.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, trainable: bool) -> Binding {
        Binding::bind_filtered(tape, store, |_, role| trainable && role == Role::Trainable)
    }

    /// Bind with an arbitrary "differentiable?" predicate over (name, role);
    /// base pretraining uses this to flip the partition.
    pub fn bind_filtered<T: Scalar>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        differentiable: impl Fn(&str, Role) -> bool,
    ) -> Binding {
        let vars = store
            .ids()
            .map(|id| {
                let t = store.get(id).clone();
                if differentiable(store.name(id), store.role(id)) {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Collect gradients for every trainable parameter that received one.
    pub fn trainable_grads<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        grads: &Grads<T>,
    ) -> Vec<(ParamId, Tensor<T>)> {
        self.grads_for(&store.trainable_ids(), grads)
    }

    /// Collect gradients for an explicit parameter set.
    pub fn grads_for<T: Scalar>(
        &self,
        ids: &[ParamId],
        grads: &Grads<T>,
    ) -> Vec<(ParamId, Tensor<T>)> {
        ids.iter()
            .filter_map(|&id| grads.get(self.var(id)).map(|g| (id, g.clone())))
            .collect()
    }
}

// ---- initializers ----

/// Uniform Xavier/Glorot init for a (rows, cols) map.
pub fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(&[rows, cols], data)
}

/// Zero-mean normal init with the given standard deviation.
pub fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("valid std");
    let data = (0..shape.iter().product())
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_ignores_other_roles() {
        let mut s = ParamStore::<f32>::new();
        s.register("a", Role::Frozen, Tensor::full(&[2], 1.0));
        let w = s.register("b", Role::Trainable, Tensor::full(&[2], 2.0));
        let frozen_before = s.digest(Some(Role::Frozen));
        s.get_mut(w).data_mut()[0] = 9.0;
        assert_eq!(frozen_before, s.digest(Some(Role::Frozen)));
        assert_ne!(s.digest(None), frozen_before);
    }

    #[test]
    fn binding_marks_only_trainable_as_differentiable() {
        let mut s = ParamStore::<f64>::new();
        let f = s.register("f", Role::Frozen, Tensor::full(&[2], 1.5));
        let t = s.register("t", Role::Trainable, Tensor::full(&[2], 2.5));
        let mut tape = Tape::new();
        let b = Binding::bind(&mut tape, &s, true);
        let prod = tape.mul(b.var(f), b.var(t));
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        assert!(grads.get(b.var(f)).is_none());
        let gt = grads.get(b.var(t)).unwrap();
        assert_eq!(gt.data(), &[1.5, 1.5]);
    }
}
