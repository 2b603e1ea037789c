use indexmap::IndexMap;

use super::array::Tensor;
use super::tape::{Tape, Var};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub frozen: bool,
}

/// Named, ordered collection of learnable tensors.
///
/// Gradients live here, not on the tape, so they survive across tapes and
/// accumulate until [`ParamStore::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on duplicate names, which would be a bug
    /// in model construction.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let grad = vec![0.0; value.numel()];
        let (idx, prev) = self.params.insert_full(
            name.clone(),
            Param {
                value,
                grad,
                frozen: false,
            },
        );
        assert!(prev.is_none(), "duplicate parameter name {name}");
        ParamId(idx)
    }

    /// Replaces a parameter's value (and shape), resetting its gradient.
    pub fn replace(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        p.grad = vec![0.0; value.numel()];
        p.value = value;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).expect("param id").0
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Param)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Freezes every parameter whose name does not satisfy `trainable`.
    pub fn freeze_except(&mut self, trainable: impl Fn(&str) -> bool) {
        for (name, p) in self.params.iter_mut() {
            p.frozen = !trainable(name);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.frozen = false;
        }
    }
}

/// Maps parameters onto a tape, binding each at most once.
///
/// Frozen parameters become constants, so backward never computes their
/// gradients.
#[derive(Debug, Default)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn new(store: &ParamStore) -> Self {
        Binding {
            vars: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = store.get(id);
        let v = tape.leaf(p.value.clone(), !p.frozen);
        self.vars[id.0] = Some(v);
        v
    }

    /// Adds tape gradients of bound parameters into the store's buffers.
    pub fn accumulate(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, v) in self.vars.iter().enumerate() {
            let Some(v) = v else { continue };
            if let Some(g) = tape.grad(*v) {
                let p = &mut store.params[i];
                p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}
