use std::collections::{BTreeMap, HashMap};

use super::{invalid, Result, Tensor, TensorError};

/// Handle to a tensor owned by a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor,
}

/// Named parameter tensors. Removed parameters leave a hole so that
/// outstanding ids never alias a different tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Option<Slot>>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(invalid("param_store", format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.slots.len());
        self.by_name.insert(name.clone(), id);
        self.slots.push(Some(Slot { name, value }));
        Ok(id)
    }

    pub fn remove(&mut self, id: ParamId) -> Option<Tensor> {
        let slot = self.slots.get_mut(id.0)?.take()?;
        self.by_name.remove(&slot.name);
        Some(slot.value)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.slot(id).value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0]
            .as_mut()
            .expect("parameter was removed")
            .value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slot(id).name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn contains(&self, id: ParamId) -> bool {
        matches!(self.slots.get(id.0), Some(Some(_)))
    }

    fn slot(&self, id: ParamId) -> &Slot {
        self.slots[id.0].as_ref().expect("parameter was removed")
    }

    /// Live parameters in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (ParamId(i), s.name.as_str(), &s.value)))
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Overwrite values from `(name, tensor)` records. Every live parameter
    /// must be present with a matching shape; extra records are an error too.
    pub fn assign_all(&mut self, records: Vec<(String, Tensor)>) -> Result<()> {
        let mut seen = 0usize;
        let mut staged = Vec::with_capacity(records.len());
        for (name, value) in records {
            let id = self.id(&name).ok_or_else(|| {
                TensorError::Checkpoint(format!("unexpected parameter `{name}` in checkpoint"))
            })?;
            let current = self.get(id);
            if current.shape() != value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, checkpoint has {:?}",
                    current.shape(),
                    value.shape()
                )));
            }
            staged.push((id, value));
            seen += 1;
        }
        if seen != self.len() {
            let missing: Vec<&str> = self
                .iter()
                .filter(|(id, _, _)| !staged.iter().any(|(s, _)| s == id))
                .map(|(_, n, _)| n)
                .collect();
            return Err(TensorError::Checkpoint(format!(
                "checkpoint is missing parameters {missing:?}"
            )));
        }
        for (id, value) in staged {
            *self.get_mut(id) = value;
        }
        Ok(())
    }
}

/// Parameter gradients keyed by id, iterated in id order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        match self.map.get_mut(&id) {
            Some(g) => g.add_assign(grad),
            None => {
                self.map.insert(id, grad.clone());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f32 {
        self.map
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f32>()
            .sqrt()
    }
}
