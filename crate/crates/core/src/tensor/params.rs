use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Running batch-norm statistics and frozen layers are not trainable.
    pub trainable: bool,
}

/// Named parameters with their gradient buffers, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name.into(),
            Entry {
                value,
                grad,
                trainable,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut Entry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.grad)
    }

    /// Replaces a value, keeping the shape contract with its gradient.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let e = self.entry_mut(name)?;
        if e.value.shape() != value.shape() {
            return Err(Error::dim("ParamStore::set_value", e.value.shape(), value.shape()));
        }
        e.value = value;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        self.entry_mut(name)?.grad.add_assign(grad)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, e) in &self.entries {
            out.entries.insert(
                name.clone(),
                Entry {
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    trainable: e.trainable,
                },
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grads_track_shape_and_zero() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::full(&[2, 3], 1.0), true);
        assert_eq!(s.grad("a").unwrap().shape(), &[2, 3]);
        s.accumulate_grad("a", &Tensor::full(&[2, 3], 0.5)).unwrap();
        s.accumulate_grad("a", &Tensor::full(&[2, 3], 0.5)).unwrap();
        assert!(s.grad("a").unwrap().data().iter().all(|&g| g == 1.0));
        s.zero_grads();
        assert!(s.grad("a").unwrap().data().iter().all(|&g| g == 0.0));
        assert!(s.accumulate_grad("a", &Tensor::zeros(&[3])).is_err());
        assert!(s.set_value("a", Tensor::zeros(&[6])).is_err());
        assert!(s.value("missing").is_err());
    }
}
