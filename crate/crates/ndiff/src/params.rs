use std::collections::HashMap;

use crate::{NdiffError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, insertion-ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor under `name`. Re-registering a name replaces the value
    /// and keeps the original id.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id.0] = value;
            return id;
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NdiffError::UnknownParam(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter of `other` into `self` (names must already exist
    /// with matching shapes).
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (_, name, value) in other.iter() {
            let id = self.id(name)?;
            let dst = self.get_mut(id);
            if dst.shape() != value.shape() {
                return Err(NdiffError::Shape {
                    op: "load_from",
                    left: dst.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            *dst = value.clone();
        }
        Ok(())
    }

    /// Fills every parameter of `self` whose name passes `select` from the
    /// same-named entry of `other`, which must exist with the same shape.
    pub fn fill_from(&mut self, other: &ParamStore, select: impl Fn(&str) -> bool) -> Result<()> {
        for i in 0..self.values.len() {
            if !select(&self.names[i]) {
                continue;
            }
            let src = other.by_name(&self.names[i])?;
            if src.shape() != self.values[i].shape() {
                return Err(NdiffError::Shape {
                    op: "fill_from",
                    left: self.values[i].shape().to_vec(),
                    right: src.shape().to_vec(),
                });
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }
}

/// Gradients keyed by [`ParamId`]; parameters that were not reached stay `None`.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += g),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Drops gradients of parameters for which `keep` is false.
    pub fn retain(&mut self, mut keep: impl FnMut(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn global_norm(&self) -> f64 {
        self.iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_and_lookup() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(2, 2));
        let b = s.add("b", Tensor::zeros(1, 3));
        assert_ne!(a, b);
        assert_eq!(s.id("b").unwrap(), b);
        assert!(s.id("c").is_err());
        assert_eq!(s.num_scalars(), 7);
        let again = s.add("a", Tensor::scalar(1.0));
        assert_eq!(again, a);
        assert_eq!(s.get(a).item(), 1.0);
    }

    #[test]
    fn grads_accumulate_and_filter() {
        let mut g = ParamGrads::new();
        g.accumulate(ParamId(1), &[1.0, 2.0]);
        g.accumulate(ParamId(1), &[1.0, 1.0]);
        g.accumulate(ParamId(0), &[3.0]);
        assert_eq!(g.get(ParamId(1)).unwrap(), &[2.0, 3.0]);
        g.retain(|id| id.index() == 0);
        assert!(g.get(ParamId(1)).is_none());
        assert_eq!(g.global_norm(), 3.0);
    }
}
