use std::collections::BTreeMap;

use viconex_autodiff::{Float, Tensor};

use crate::error::{Error, Result};

/// Named model tensors: trainable parameters plus fixed buffers.
///
/// Both maps are ordered by name so iteration, serialization and optimizer
/// state layout are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t.with_grad(true));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t.with_grad(false));
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing buffer {name:?}")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>().with_grad(true)))
                .collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast::<U>())).collect(),
        }
    }

    /// All parameter values concatenated in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.params.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Input(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for t in self.params.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trip_in_name_order() {
        let mut p = ParamStore::<f64>::new();
        p.insert_param("b", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        p.insert_param("a", Tensor::from_f64(&[1], &[1.0]).unwrap());
        p.insert_buffer("z", Tensor::from_f64(&[1], &[9.0]).unwrap());
        assert_eq!(p.flatten(), vec![1.0, 3.0, 4.0]);
        p.unflatten(&[5.0, 6.0, 7.0]).unwrap();
        assert_eq!(p.param("b").unwrap().data(), &[6.0, 7.0]);
        assert_eq!(p.param_count(), 3);
        assert!(p.unflatten(&[1.0]).is_err());
        assert!(p.param("z").is_err());
        assert_eq!(p.buffer("z").unwrap().data(), &[9.0]);
    }
}
