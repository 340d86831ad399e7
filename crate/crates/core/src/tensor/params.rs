use std::collections::HashMap;

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named parameter storage, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    groups: Vec<ParamGroup>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.groups.len());
        self.by_name.insert(name.clone(), id);
        self.groups.push(ParamGroup {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamGroup {
        &self.groups[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamGroup {
        &mut self.groups[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamGroup> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGroup)> {
        self.groups.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.groups[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        for g in &mut self.groups {
            g.trainable = false;
        }
    }

    pub fn num_params(&self) -> usize {
        self.groups.iter().map(|g| g.tensor.numel()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| g.trainable)
            .map(|g| g.tensor.numel())
            .sum()
    }

    /// Put every parameter on `tape`; only trainable groups require grad.
    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .groups
            .iter()
            .map(|g| tape.leaf(g.tensor.clone(), g.trainable))
            .collect();
        ParamVars { vars }
    }

    /// Put every parameter on `tape` as a constant (inference).
    pub fn bind_constants(&self, tape: &mut Tape) -> ParamVars {
        let vars = self.groups.iter().map(|g| tape.constant(g.tensor.clone())).collect();
        ParamVars { vars }
    }
}

/// Tape variables for every parameter of a [`ParamStore`], by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient per parameter group (`None` for frozen or unreached groups).
    pub fn collect(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }
}

/// Plain SGD with a fixed learning rate. Frozen groups are never written.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f32,
}

impl Sgd {
    pub fn new(lr: f32) -> Self {
        Sgd { lr }
    }

    /// Returns the number of groups updated.
    pub fn step(&self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<usize> {
        let mut updated = 0;
        for (group, grad) in store.groups.iter_mut().zip(grads) {
            let (true, Some(grad)) = (group.trainable, grad) else {
                continue;
            };
            if grad.shape() != group.tensor.shape() {
                return Err(Error::shape("sgd", group.tensor.shape(), grad.shape()));
            }
            for (w, g) in group.tensor.data_mut().iter_mut().zip(grad.data()) {
                *w -= self.lr * g;
            }
            updated += 1;
        }
        Ok(updated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frozen_groups_are_bitwise_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let frozen = store.insert("frozen", Tensor::randn(&[3, 3], 1.0, &mut rng), false).unwrap();
        let live = store.insert("live", Tensor::randn(&[3, 3], 1.0, &mut rng), true).unwrap();
        let before = store.get(frozen).tensor.clone();
        let live_before = store.get(live).tensor.clone();
        let sgd = Sgd::new(0.1);
        for _ in 0..10 {
            let grads = vec![Some(Tensor::ones(&[3, 3])), Some(Tensor::ones(&[3, 3]))];
            assert_eq!(sgd.step(&mut store, &grads).unwrap(), 1);
        }
        assert!(store.get(frozen).tensor.bit_eq(&before));
        assert!(!store.get(live).tensor.bit_eq(&live_before));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[1]), true).unwrap();
        assert!(store.insert("w", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn bind_marks_only_trainable_as_requiring_grad() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::ones(&[2]), true).unwrap();
        let b = store.insert("b", Tensor::ones(&[2]), false).unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        assert!(tape.requires_grad(vars.var(a)).unwrap());
        assert!(!tape.requires_grad(vars.var(b)).unwrap());
    }
}
