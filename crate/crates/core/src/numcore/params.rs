use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(store index, gradient)` for each trainable parameter.
pub type ParamGrads = Vec<(usize, Vec<f64>)>;

/// A named model tensor plus its freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered parameter set with unique dot-path ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let id = id.into();
        if self.index.contains_key(&id) {
            return Err(Error::config(format!("duplicate parameter id {id}")));
        }
        self.index.insert(id.clone(), self.params.len());
        self.params.push(Parameter { id, value, trainable });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Parameter> {
        self.position(id).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter> {
        self.position(id).map(move |i| &mut self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn value(&self, id: &str) -> Result<&Tensor> {
        self.get(id).map(|p| &p.value).ok_or_else(|| Error::config(format!("missing parameter {id}")))
    }

    pub fn set_trainable(&mut self, id: &str, trainable: bool) -> Result<()> {
        let p = self.get_mut(id).ok_or_else(|| Error::config(format!("missing parameter {id}")))?;
        p.trainable = trainable;
        Ok(())
    }

    pub fn trainable_ids(&self) -> Vec<&str> {
        self.params.iter().filter(|p| p.trainable).map(|p| p.id.as_str()).collect()
    }

    /// Total entries over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// SHA-256 over ids, shapes and value bits of the selected parameters.
    pub fn digest(&self, select: impl Fn(&Parameter) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| select(p)) {
            h.update(p.id.as_bytes());
            for &s in p.value.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Graph under construction plus lazily bound parameter leaves.
pub struct Forward<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<NodeId>>,
    track_grads: bool,
}

impl<'a> Forward<'a> {
    /// With `track_grads`, trainable parameters become gradient-carrying leaves.
    pub fn new(store: &'a ParamStore, track_grads: bool) -> Self {
        Self::with_graph(Graph::new(), store, track_grads)
    }

    pub fn with_graph(g: Graph, store: &'a ParamStore, track_grads: bool) -> Self {
        Self { g, store, bound: vec![None; store.len()], track_grads }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Leaf node for parameter `id`, created on first use.
    pub fn param(&mut self, id: &str) -> Result<NodeId> {
        let i = self.store.position(id).ok_or_else(|| Error::config(format!("missing parameter {id}")))?;
        if let Some(n) = self.bound[i] {
            return Ok(n);
        }
        let p = self.store.by_index(i);
        let n = self.g.leaf(p.value.clone(), self.track_grads && p.trainable);
        self.bound[i] = Some(n);
        Ok(n)
    }

    /// Per-parameter gradients for every trainable parameter (zeros when unused).
    pub fn param_grads(&self, grads: &mut Gradients) -> ParamGrads {
        let mut out = Vec::new();
        for (i, p) in self.store.iter().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = self.bound[i].and_then(|n| grads.take(n)).unwrap_or_else(|| vec![0.0; p.value.len()]);
            out.push((i, g));
        }
        out
    }
}
