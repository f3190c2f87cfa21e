use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// Storage identity of a slot inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotId(pub usize);

/// One layer's parameters plus its optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    pub tensors: Vec<Tensor>,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    pub(crate) steps: u64,
}

impl Slot {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.m
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Named parameter slots and the `(agent, layer) -> slot` binding map.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    slots: Vec<Slot>,
    bindings: BTreeMap<(usize, usize), SlotId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_slot(&mut self, name: &str, tensors: Vec<Tensor>) -> SlotId {
        let zeros: Vec<Tensor> = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        self.slots.push(Slot {
            name: name.to_string(),
            m: zeros.clone(),
            v: zeros,
            tensors,
            steps: 0,
        });
        SlotId(self.slots.len() - 1)
    }

    pub fn bind(&mut self, agent: usize, layer: usize, slot: SlotId) -> Result<(), NnError> {
        if slot.0 >= self.slots.len() {
            return Err(NnError::Index(format!("slot {}", slot.0)));
        }
        self.bindings.insert((agent, layer), slot);
        Ok(())
    }

    pub fn binding(&self, agent: usize, layer: usize) -> Result<SlotId, NnError> {
        self.bindings
            .get(&(agent, layer))
            .copied()
            .ok_or_else(|| NnError::Index(format!("no binding for agent {agent} layer {layer}")))
    }

    pub fn bindings(&self) -> impl Iterator<Item = ((usize, usize), SlotId)> + '_ {
        self.bindings.iter().map(|(k, v)| (*k, *v))
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_ids(&self) -> impl Iterator<Item = SlotId> {
        (0..self.slots.len()).map(SlotId)
    }

    pub fn slot(&self, id: SlotId) -> Result<&Slot, NnError> {
        self.slots
            .get(id.0)
            .ok_or_else(|| NnError::Index(format!("slot {}", id.0)))
    }

    pub(crate) fn slot_mut(&mut self, id: SlotId) -> Result<&mut Slot, NnError> {
        self.slots
            .get_mut(id.0)
            .ok_or_else(|| NnError::Index(format!("slot {}", id.0)))
    }

    pub fn tensor(&self, id: SlotId, index: usize) -> Result<&Tensor, NnError> {
        self.slot(id)?
            .tensors
            .get(index)
            .ok_or_else(|| NnError::Index(format!("tensor {index} of slot {}", id.0)))
    }

    pub fn tensor_mut(&mut self, id: SlotId, index: usize) -> Result<&mut Tensor, NnError> {
        let s = self.slot_mut(id)?;
        s.tensors
            .get_mut(index)
            .ok_or_else(|| NnError::Index(format!("tensor {index} of slot {}", id.0)))
    }

    /// Every slot must be reachable from at least one binding.
    pub fn validate(&self) -> Result<(), NnError> {
        let mut used = vec![false; self.slots.len()];
        for id in self.bindings.values() {
            used[id.0] = true;
        }
        match used.iter().position(|u| !u) {
            Some(k) => Err(NnError::Dangling(self.slots[k].name.clone())),
            None => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.slots.iter().map(Slot::param_count).sum()
    }

    /// Copies parameter values (not optimizer state) from a store with the
    /// same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        if self.slots.len() != other.slots.len() {
            return Err(NnError::Shape("slot count differs".into()));
        }
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            if a.tensors.len() != b.tensors.len() {
                return Err(NnError::Shape(format!("slot {} layout differs", a.name)));
            }
            for (x, y) in a.tensors.iter_mut().zip(&b.tensors) {
                if x.shape() != y.shape() {
                    return Err(NnError::Shape(format!("slot {} shape differs", a.name)));
                }
                x.data_mut().copy_from_slice(y.data());
            }
        }
        Ok(())
    }

    /// Parameter values equal, optimizer state ignored.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.slots.len() == other.slots.len()
            && self
                .slots
                .iter()
                .zip(&other.slots)
                .all(|(a, b)| a.tensors == b.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .iter()
            .all(|s| s.tensors.iter().all(Tensor::is_finite))
    }
}
