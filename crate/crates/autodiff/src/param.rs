use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Scalar, Tensor};

/// Handle to a parameter: the owning store's identity plus its index there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u64,
    index: usize,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index
    }
}

static NEXT_STORE: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParamError {
    #[error("parameter `{0}` is already registered")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` has shape {expected:?}, got {got:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Named, ordered collection of tensors with a per-parameter trainable flag. Every store
/// (clones included) has its own identity, so ids from different stores never alias.
pub struct ParamStore<T> {
    uid: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        let mut s = Self::new();
        s.names = self.names.clone();
        s.values = self.values.clone();
        s.trainable = self.trainable.clone();
        s.index = self
            .index
            .iter()
            .map(|(k, id)| (k.clone(), s.make_id(id.index)))
            .collect();
        s
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId, ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let id = self.make_id(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.trainable.push(true);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    fn make_id(&self, index: usize) -> ParamId {
        ParamId { store: self.uid, index }
    }

    /// Whether `id` was issued by this store.
    pub fn owns(&self, id: ParamId) -> bool {
        id.store == self.uid && id.index < self.values.len()
    }

    fn slot(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.uid, "parameter id from another store");
        id.index
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[self.slot(id)]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[self.slot(id)]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        let i = self.slot(id);
        &mut self.values[i]
    }

    /// Replaces a value by name, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), ParamError> {
        let id = self.id(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let i = self.slot(id);
        let cur = &mut self.values[i];
        if cur.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: cur.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[self.slot(id)]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        let i = self.slot(id);
        self.trainable[i] = on;
    }

    /// Sets every flag from a name predicate.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (flag, name) in self.trainable.iter_mut().zip(&self.names) {
            *flag = pred(name);
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(|i| self.make_id(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> + '_ {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (self.make_id(i), n.as_str(), v))
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.numel())
            .sum()
    }
}
