use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameters. Iteration order is insertion
/// order, which keeps checkpoints and update sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name:?}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Learnable scalars across all `requires_grad` tensors.
    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(|t| t.numel())
            .sum()
    }

    /// Order-sensitive checksum of all values; cheap change detector for
    /// update-isolation assertions.
    pub fn checksum(&self) -> f64 {
        let mut acc = 0.0f64;
        let mut k = 1.0f64;
        for t in &self.tensors {
            for v in t.values() {
                acc += v.as_f64() * k;
                k = -k;
            }
            acc = acc.sin() * 1e6;
        }
        acc
    }

    pub fn clear_adjoints(&mut self) {
        for t in &mut self.tensors {
            t.clear_adjoint();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_lookup_count() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("w", Tensor::zeros(vec![2, 3]).with_grad());
        store.insert("frozen", Tensor::zeros(vec![4]));
        assert_eq!(store.lookup("w"), Some(a));
        assert_eq!(store.param_count(), 6);
        assert_eq!(store.len(), 2);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_name_panics() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::zeros(vec![1]));
        store.insert("w", Tensor::zeros(vec![1]));
    }
}
