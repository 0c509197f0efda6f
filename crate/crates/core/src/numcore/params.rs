use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    value: Tensor,
}

/// Owned, named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(NamedTensor {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Adds a `rows × cols` matrix drawn uniformly from `±1/sqrt(rows)`.
    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        let value = Tensor::matrix(rows, cols, data).expect("consistent shape");
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Plain SGD: `θ ← θ − lr · g`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (id, g) in &grads.entries {
            for (w, d) in self.entries[id.0].value.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            e.value.validate()?;
            if !e.value.all_finite() {
                return Err(Error::Parse(format!("parameter {} is not finite", e.name)));
            }
        }
        Ok(())
    }
}

/// Gradients of the parameters that took part in one graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(p, t)| (*p, t))
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }
}

/// A graph whose parameter leaves are bound lazily from a [`ParamStore`].
pub struct Tape<'p> {
    graph: Graph,
    store: &'p ParamStore,
    bound: Vec<Option<NodeId>>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Node holding parameter `id`; the value is copied in on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.bound[id.0] {
            return node;
        }
        let node = self.graph.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(node);
        node
    }

    /// Moves out the accumulated gradients of every bound parameter.
    pub fn into_gradients(mut self) -> Gradients {
        let mut entries = Vec::new();
        for (i, node) in self.bound.iter().enumerate() {
            if let Some(node) = node {
                if let Some(g) = self.graph.take_grad(*node) {
                    entries.push((ParamId(i), g));
                }
            }
        }
        Gradients { entries }
    }
}

impl Deref for Tape<'_> {
    type Target = Graph;

    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Tape<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_binds_once_and_sgd_applies() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(vec![1.0, -2.0]));
        let grads = {
            let mut tape = Tape::new(&store);
            let a = tape.param(w);
            let b = tape.param(w);
            assert_eq!(a, b);
            let sq = tape.square(a).unwrap();
            let s = tape.sum(sq).unwrap();
            tape.backward(s).unwrap();
            tape.into_gradients()
        };
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0]);
        store.sgd_step(&grads, 0.5);
        assert_eq!(store.get(w).data(), &[0.0, 0.0]);
    }
}
