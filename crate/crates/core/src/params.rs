//! Named parameter tensors shared between forward tapes and the optimizer.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Handle to one tensor in a [`ParamStore`]. Indices are assigned in
/// insertion order and stay stable for the lifetime of the store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

struct Entry {
    name: String,
    values: Arc<Vec<f32>>,
    shape: Vec<usize>,
}

/// Ordered collection of named parameter tensors.
///
/// Values live behind `Arc` so tapes can reference them without copying;
/// the optimizer mutates them through [`ParamStore::values_mut`] between
/// forward passes.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names must be unique; slashes form namespaces
    /// (e.g. `denoiser/stem/conv`).
    pub fn add(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Optimizer(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        if values.len() != numel || numel == 0 {
            return Err(Error::Optimizer(format!(
                "parameter {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            values: Arc::new(values),
            shape: shape.to_vec(),
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn values(&self, id: ParamId) -> &[f32] {
        &self.entries[id.0].values
    }

    /// Mutable view for optimizer updates. Copy-on-write: any tape still
    /// holding the old Arc keeps the pre-update values.
    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f32> {
        Arc::make_mut(&mut self.entries[id.0].values)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Total scalars in tensors whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.values.len())
            .sum()
    }
}

/// Tape-local bindings of every parameter in a store.
///
/// Binding shares the underlying `Arc` storage, so this is cheap even for
/// large models; harvested gradients are summed into a [`Grads`] in fixed
/// parameter order, which keeps multi-item accumulation deterministic.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Bind all parameters onto `tape` with gradients enabled.
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        Self::bind_with_grad(tape, store, true)
    }

    /// Bind all parameters without gradients (inference tapes).
    pub fn bind_frozen(tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        Self::bind_with_grad(tape, store, false)
    }

    fn bind_with_grad(tape: &mut Tape, store: &ParamStore, requires_grad: bool) -> Result<Self> {
        let mut vars = Vec::with_capacity(store.len());
        for id in store.ids() {
            let arc = Arc::clone(&store.entries[id.0].values);
            vars.push(tape.leaf_shared(arc, store.shape(id), requires_grad)?);
        }
        Ok(Self { vars })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Move this tape's parameter gradients into `grads` (summing).
    pub fn harvest(&self, tape: &mut Tape, grads: &mut Grads) {
        for (i, var) in self.vars.iter().enumerate() {
            if let Some(g) = tape.take_grad(*var) {
                grads.add(ParamId(i), g);
            }
        }
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
pub struct Grads {
    sums: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Self { sums: vec![None; store.len()] }
    }

    pub fn add(&mut self, id: ParamId, g: Vec<f32>) {
        match &mut self.sums[id.0] {
            Some(acc) => {
                debug_assert_eq!(acc.len(), g.len());
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.sums[id.0].as_deref()
    }

    /// Multiply every accumulated gradient by `c` (e.g. 1/batch).
    pub fn scale(&mut self, c: f32) {
        for s in self.sums.iter_mut().flatten() {
            for v in s.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn clear(&mut self) {
        for s in self.sums.iter_mut() {
            *s = None;
        }
    }

    /// Global L2 norm over all gradients (diagnostics).
    pub fn l2_norm(&self) -> f64 {
        self.sums
            .iter()
            .flatten()
            .flat_map(|s| s.iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut store = ParamStore::new();
        let a = store.add("net/w", vec![1.0, 2.0], &[2]).unwrap();
        let b = store.add("net/b", vec![0.0], &[1]).unwrap();
        assert_eq!(store.id("net/w"), Some(a));
        assert_eq!(store.name(b), "net/b");
        assert_eq!(store.num_scalars(), 3);
        assert_eq!(store.num_scalars_with_prefix("net/w"), 2);
        assert!(store.add("net/w", vec![0.0], &[1]).is_err());
        assert!(store.add("bad", vec![0.0], &[2]).is_err());
    }

    #[test]
    fn bound_params_harvest_sums_over_tapes() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![3.0], &[1]).unwrap();
        let mut grads = Grads::new(&store);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &store).unwrap();
            let wv = bound.var(w);
            let sq = tape.mul(wv, wv).unwrap();
            let loss = tape.sum_all(sq).unwrap();
            tape.backward(loss).unwrap();
            bound.harvest(&mut tape, &mut grads);
        }
        // d(w²)/dw = 6 per tape, two tapes.
        assert_eq!(grads.get(w).unwrap(), &[12.0]);
    }

    #[test]
    fn copy_on_write_keeps_old_tape_values() {
        let mut store = ParamStore::new();
        let w = store.add("w", vec![1.0], &[1]).unwrap();
        let mut tape = Tape::new();
        let bound = BoundParams::bind_frozen(&mut tape, &store).unwrap();
        store.values_mut(w)[0] = 99.0;
        assert_eq!(tape.values(bound.var(w)), &[1.0]);
        assert_eq!(store.values(w), &[99.0]);
    }
}
