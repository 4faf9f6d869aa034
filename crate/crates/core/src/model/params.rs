use std::collections::HashMap;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    /// Batch-norm gamma.
    Scale,
    /// Batch-norm beta.
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    /// Running statistics are state, not learnable parameters.
    pub fn is_buffer(self) -> bool {
        matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: u8,
    pub role: ParamRole,
    pub trainable: bool,
}

/// Named tensors of a model in canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub(crate) fn push(&mut self, name: String, value: Tensor, group: u8, role: ParamRole) -> usize {
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Param {
            name,
            value,
            group,
            role,
            trainable: !role.is_buffer(),
        });
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| &self.params[i])
    }

    /// Elements of all learnable (non-buffer) tensors.
    pub fn learnable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.role.is_buffer()).map(|p| p.value.numel()).sum()
    }

    /// Elements of learnable tensors currently unfrozen.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.role.is_buffer() && p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }
}
