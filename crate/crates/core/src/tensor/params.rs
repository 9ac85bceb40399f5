//! Named parameter collections shared between model code, the optimizer,
//! and checkpoint i/o. Entry order is fixed at construction, which pins the
//! optimizer update order and keeps training bitwise reproducible.

use std::collections::BTreeMap;

use super::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor, trainable: bool) -> ParamId {
        assert!(!self.names.iter().any(|n| n == name), "duplicate parameter name {name}");
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// All tensors in insertion order.
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Ids of trainable entries in insertion order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.len()).filter(|&i| self.trainable[i]).map(ParamId).collect()
    }

    /// Register every parameter on a fresh graph. Trainable entries get
    /// `requires_grad = true`.
    pub fn register(&self, g: &mut Graph) -> RegisteredParams {
        let ids = self
            .tensors
            .iter()
            .zip(&self.trainable)
            .map(|(t, &tr)| g.input(t.clone(), tr))
            .collect();
        RegisteredParams { ids }
    }

    /// Freeze everything (e.g. the VAE during the diffusion stage).
    pub fn freeze_all(&mut self) {
        for t in self.trainable.iter_mut() {
            *t = false;
        }
    }

    pub fn to_map(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }

    /// Load values for every entry from `map` (keys `prefix + name`).
    pub fn load_from_map(
        &mut self,
        prefix: &str,
        map: &BTreeMap<String, Tensor>,
    ) -> Result<(), super::io::CheckpointError> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{n}");
            let src = map
                .get(&key)
                .ok_or_else(|| super::io::CheckpointError::Missing(key.clone()))?;
            if src.shape() != t.shape() {
                return Err(super::io::CheckpointError::Entry {
                    name: key,
                    detail: format!("shape {:?} != expected {:?}", src.shape(), t.shape()),
                });
            }
            *t = src.clone();
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Node ids of a `ParamSet` registered on one graph, index-aligned.
pub struct RegisteredParams {
    ids: Vec<NodeId>,
}

impl RegisteredParams {
    /// Adopt externally-registered nodes (index-aligned with the set).
    /// Used by gradient checkers that register parameters as check inputs.
    pub fn from_nodes(ids: Vec<NodeId>) -> Self {
        RegisteredParams { ids }
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.0]
    }
}
