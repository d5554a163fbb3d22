use std::collections::HashMap;

use super::tape::{Tape, ValId};
use super::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Learning-rate / freezing group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Backbone,
    Head,
    Adapter,
}

/// One named parameter tensor. `decay` marks weight matrices that receive
/// weight decay; biases, gains and embeddings are excluded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
    pub decay: bool,
}

/// Ordered collection of named parameters. Registration order is the
/// optimizer update order, so runs are reproducible.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        group: ParamGroup,
        decay: bool,
    ) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name:?} registered twice"
        );
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, tensor, group, decay });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total element count over all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Element count per group `(backbone, head, adapter)`.
    pub fn numel_by_group(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for p in &self.params {
            let n = p.tensor.numel();
            match p.group {
                ParamGroup::Backbone => counts.0 += n,
                ParamGroup::Head => counts.1 += n,
                ParamGroup::Adapter => counts.2 += n,
            }
        }
        counts
    }

    /// Set `requires_grad` on every parameter in `group`.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for p in &mut self.params {
            if p.group == group {
                p.tensor.requires_grad = trainable;
            }
        }
    }

    /// Rebuild the name index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    /// Register every parameter as a tape leaf, in order.
    pub fn bind(&self, tape: &mut Tape) -> ParamBind {
        let ids = self
            .params
            .iter()
            .map(|p| tape.leaf_tensor(&p.tensor))
            .collect();
        ParamBind { ids }
    }

    /// Parameters must be bit-identical to `other` (used by freeze-contract
    /// tests and checkpoint round trips).
    pub fn bits_equal(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(other.params.iter()).all(|(a, b)| {
                a.name == b.name
                    && a.tensor.shape == b.tensor.shape
                    && a.tensor
                        .data
                        .iter()
                        .zip(b.tensor.data.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tape leaf ids for a bound `ParamSet`, aligned with registration order.
#[derive(Debug, Clone)]
pub struct ParamBind {
    pub ids: Vec<ValId>,
}

impl ParamBind {
    pub fn id(&self, param_idx: usize) -> ValId {
        self.ids[param_idx]
    }
}
