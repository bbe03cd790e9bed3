use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Slot index into a `ParamStore`; resolved once at model build time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Named parameter tensors in stable insertion order. Order defines the
/// checkpoint layout and the optimizer state alignment, so registration
/// must be deterministic.
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, u32>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::graph(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.names.len() as u32);
        self.index.insert(name.to_string(), id.0);
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::MissingEntry { name: name.to_string() })
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index()]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i as u32), n.as_str(), v))
    }

    /// Overwrite a slot from a checkpoint entry; dims must match.
    pub fn load_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        let cur = &self.values[id.index()];
        if cur.dims() != value.dims() {
            return Err(Error::shape(
                "load_value",
                format!("{name:?}: stored {:?} vs checkpoint {:?}", cur.dims(), value.dims()),
            ));
        }
        self.values[id.index()] = value;
        Ok(())
    }
}

/// Gradients aligned to a `ParamStore`: slot i holds dLoss/dparam_i.
/// Slots never touched by the graph stay `None` (reported as zero).
pub struct Grads<T> {
    pub(crate) slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros(len: usize) -> Self {
        Grads { slots: (0..len).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.index()).and_then(|s| s.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        let slot = &mut self.slots[id.index()];
        match slot {
            None => *slot = Some(g.clone()),
            Some(acc) => {
                debug_assert_eq!(acc.dims(), g.dims());
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }
}
