use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Named tensors with a trainable flag, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(p) => {
                p.trainable = trainable;
                Ok(())
            }
            None => Err(Error::InvalidArgument(format!(
                "unknown parameter `{name}`"
            ))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concatenation of every trainable tensor, in name order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Inverse of [`flatten_trainable`](Self::flatten_trainable).
    pub fn unflatten_trainable(&mut self, flat: &[f64]) -> Result<()> {
        let need: usize = self
            .entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum();
        if need != flat.len() {
            return Err(Error::Shape {
                op: "unflatten_trainable",
                lhs: vec![need],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in self.entries.values_mut().filter(|p| p.trainable) {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Gradient (or perturbation) tensors keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    entries: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.entries.insert(name.into(), g);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// L2 norm over the concatenation of every tensor.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Rebuilds a map with the same names and shapes as `self` from `flat`.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Grads> {
        let need: usize = self.entries.values().map(Tensor::len).sum();
        if need != flat.len() {
            return Err(Error::Shape {
                op: "unflatten_like",
                lhs: vec![need],
                rhs: vec![flat.len()],
            });
        }
        let mut off = 0;
        let mut out = Grads::new();
        for (k, t) in &self.entries {
            let n = t.len();
            out.insert(
                k.clone(),
                Tensor::from_parts(t.shape().to_vec(), flat[off..off + n].to_vec()),
            );
            off += n;
        }
        Ok(out)
    }

    pub fn scale(&self, c: f64) -> Grads {
        Grads {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.scale(c)))
                .collect(),
        }
    }

    /// Entrywise sum; names missing on one side are taken from the other.
    pub fn plus(&self, other: &Grads) -> Result<Grads> {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            let merged = match out.entries.get(k) {
                Some(mine) => mine.add(v)?,
                None => v.clone(),
            };
            out.entries.insert(k.clone(), merged);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Grads) -> f64 {
        self.entries
            .iter()
            .map(|(k, v)| match other.entries.get(k) {
                Some(o) => v.max_abs_diff(o),
                None => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", Tensor::zeros(&[1, 2]), true).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1, 2]), false).is_err());
    }

    #[test]
    fn iteration_is_name_ordered() {
        let mut p = ParamSet::new();
        for n in ["z", "a", "m"] {
            p.insert(n, Tensor::zeros(&[1, 1]), true).unwrap();
        }
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a", "m", "z"]);
    }

    proptest! {
        #[test]
        fn flatten_unflatten_identity(a in prop::collection::vec(-5.0f64..5.0, 1..6),
                                      b in prop::collection::vec(-5.0f64..5.0, 1..6)) {
            let mut p = ParamSet::new();
            p.insert("b", Tensor::row(b.clone()).unwrap(), true).unwrap();
            p.insert("a", Tensor::row(a.clone()).unwrap(), true).unwrap();
            p.insert("frozen", Tensor::row(vec![9.0]).unwrap(), false).unwrap();
            let flat = p.flatten_trainable();
            let mut q = p.clone();
            q.unflatten_trainable(&flat).unwrap();
            prop_assert_eq!(&p, &q);
            prop_assert_eq!(flat.len(), a.len() + b.len());

            let mut g = Grads::new();
            g.insert("a", Tensor::row(a).unwrap());
            g.insert("b", Tensor::row(b).unwrap());
            prop_assert_eq!(g.unflatten_like(&g.flatten()).unwrap(), g);
        }
    }
}
