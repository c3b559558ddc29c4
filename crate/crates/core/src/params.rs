//! Named parameter tensors plus Adam moment slots.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// First and second moment estimates for one trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlots<T: Scalar> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub value: Tensor<T>,
    pub trainable: bool,
    /// Present exactly for trainable entries.
    pub slots: Option<AdamSlots<T>>,
}

/// Ordered map of parameter name to tensor. Iteration order is insertion
/// order, which is also the serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, ParamEntry<T>>,
}

/// Gradients keyed by trainable parameter name.
pub type GradMap<T> = IndexMap<String, Tensor<T>>;

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; trainable entries get zeroed moment slots.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Construction(format!("duplicate parameter name {name:?}")));
        }
        let slots = trainable.then(|| AdamSlots {
            m: value.zeros_like(),
            v: value.zeros_like(),
        });
        self.entries.insert(
            name,
            ParamEntry {
                value,
                trainable,
                slots,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    /// Like [`ParamStore::get`] but a missing name is a state error.
    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::State(format!("parameter {name:?} missing from store")))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn entry_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::State(format!("parameter {name:?} missing from store")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.as_str())
    }

    /// Replaces moment slots for a trainable entry.
    pub fn set_slots(&mut self, name: &str, slots: AdamSlots<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("parameter {name:?} missing from store")))?;
        if !entry.trainable {
            return Err(Error::State(format!("{name:?} is not trainable and has no optimizer slots")));
        }
        if slots.m.shape() != entry.value.shape() || slots.v.shape() != entry.value.shape() {
            return Err(Error::State(format!("optimizer slot shape mismatch for {name:?}")));
        }
        entry.slots = Some(slots);
        Ok(())
    }

    /// Same contents converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            trainable: e.trainable,
                            slots: e.slots.as_ref().map(|s| AdamSlots {
                                m: s.m.cast(),
                                v: s.v.cast(),
                            }),
                        },
                    )
                })
                .collect(),
        }
    }

    /// All-zero gradient map over the trainable entries.
    pub fn zero_grads(&self) -> GradMap<T> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.value.zeros_like()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_only_for_trainable() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::zeros(vec![2, 2]).unwrap(), true).unwrap();
        s.insert("mean", Tensor::zeros(vec![2]).unwrap(), false).unwrap();
        assert!(s.entry("w").unwrap().slots.is_some());
        assert!(s.entry("mean").unwrap().slots.is_none());
        assert_eq!(s.trainable_names().collect::<Vec<_>>(), vec!["w"]);
        assert!(s.insert("w", Tensor::zeros(vec![1]).unwrap(), true).is_err());
        let zero_slots = AdamSlots {
            m: Tensor::zeros(vec![2]).unwrap(),
            v: Tensor::zeros(vec![2]).unwrap(),
        };
        assert!(s.set_slots("mean", zero_slots).is_err());
    }
}
