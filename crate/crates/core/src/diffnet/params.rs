use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| dim_err!("missing parameter tensor `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().map(Tensor::sq_norm).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn expect_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(dim_err!(
                "parameter sets differ in size: {} vs {}",
                self.len(),
                other.len()
            ));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(dim_err!("parameter name mismatch: `{na}` vs `{nb}`"));
            }
            if a.shape() != b.shape() {
                return Err(dim_err!(
                    "parameter `{na}` shape mismatch: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                ));
            }
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.expect_same_layout(other)?;
        let mut out = ParamSet::new();
        for ((name, a), (_, b)) in self.iter().zip(other.iter()) {
            out.insert(name.clone(), a.zip_map(b, &f)?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.map(&f)))
                .collect(),
        }
    }

    /// Like [`ParamSet::map`] but visits entries in order with a stateful
    /// closure (name order, then row-major).
    pub fn map_with(&self, mut f: impl FnMut(f64) -> f64) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let data = v.data().iter().map(|&x| f(x)).collect();
                    (k.clone(), Tensor::new(v.shape().to_vec(), data).expect("shape"))
                })
                .collect(),
        }
    }

    pub fn add(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> ParamSet {
        self.map(|v| v * c)
    }

    pub fn dot(&self, other: &ParamSet) -> Result<f64> {
        self.expect_same_layout(other)?;
        let mut s = 0.0;
        for ((_, a), (_, b)) in self.iter().zip(other.iter()) {
            s += a.dot(b)?;
        }
        Ok(s)
    }

    pub fn zeros_like(&self) -> ParamSet {
        self.map(|_| 0.0)
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Splits into (names accepted by `pred`, the rest).
    pub fn partition(&self, pred: impl Fn(&str) -> bool) -> (ParamSet, ParamSet) {
        let mut yes = ParamSet::new();
        let mut no = ParamSet::new();
        for (k, v) in self.iter() {
            if pred(k) {
                yes.insert(k.clone(), v.clone());
            } else {
                no.insert(k.clone(), v.clone());
            }
        }
        (yes, no)
    }

    /// Union of two sets with disjoint names.
    pub fn merge(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            if out.insert(k.clone(), v.clone()).is_some() {
                return Err(dim_err!("duplicate parameter name `{k}` in merge"));
            }
        }
        Ok(out)
    }

    /// All entries concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

impl IntoIterator for ParamSet {
    type Item = (String, Tensor);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.tensors.into_iter()
    }
}
