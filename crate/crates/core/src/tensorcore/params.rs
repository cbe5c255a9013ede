use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stable handle to a parameter inside a [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
///
/// Insertion order is the iteration order, so optimizer state and checkpoints
/// line up across runs that build the model the same way.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name `{name}`")));
        }
        let tensor = if tensor.requires_grad() {
            tensor
        } else {
            tensor.requiring_grad()
        };
        let (index, _) = self.entries.insert_full(name, tensor);
        Ok(ParamId(index))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, (k, v))| (ParamId(i), k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.grad().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = self.get_mut(id);
        if t.numel() != values.len() {
            return Err(Error::dim("set_values", t.numel(), values.len()));
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }
}

/// Registers parameters under a dotted name prefix, drawing weights from
/// `N(0, std²)` with a shared generator.
pub struct ParamBuilder<'a, R: Rng> {
    params: &'a mut ParameterSet,
    rng: &'a mut R,
    prefix: String,
    std: f64,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(params: &'a mut ParameterSet, rng: &'a mut R, prefix: &str, std: f64) -> Self {
        Self {
            params,
            rng,
            prefix: prefix.to_string(),
            std,
        }
    }

    pub fn scoped(&mut self, name: &str) -> ParamBuilder<'_, R> {
        let prefix = self.full_name(name);
        ParamBuilder {
            params: self.params,
            rng: self.rng,
            prefix,
            std: self.std,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = normal_tensor(self.rng, shape, self.std);
        self.params.insert(self.full_name(name), t)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.params.insert(self.full_name(name), filled_tensor(shape, value))
    }
}

/// Samples a tensor with entries drawn from `N(0, std²)`.
pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let numel = shape.iter().product();
    let values = (0..numel).map(|_| dist.sample(rng)).collect();
    Tensor::with_shape_unchecked(shape.to_vec(), values)
}

pub fn filled_tensor(shape: &[usize], value: f64) -> Tensor {
    let numel = shape.iter().product();
    Tensor::with_shape_unchecked(shape.to_vec(), vec![value; numel])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_order_is_stable() {
        let mut p = ParameterSet::new();
        let a = p.insert("b.weight", Tensor::zeros(&[2])).unwrap();
        let b = p.insert("a.weight", Tensor::zeros(&[3])).unwrap();
        assert!(p.insert("a.weight", Tensor::zeros(&[1])).is_err());
        let names: Vec<_> = p.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, ["b.weight", "a.weight"]);
        assert_eq!(p.id("a.weight"), Some(b));
        assert_eq!(p.name(a), "b.weight");
        assert!(p.get(a).requires_grad());
    }

    #[test]
    fn seeded_init_is_bit_identical() {
        let a = normal_tensor(&mut ChaCha8Rng::seed_from_u64(7), &[4, 4], 0.02);
        let b = normal_tensor(&mut ChaCha8Rng::seed_from_u64(7), &[4, 4], 0.02);
        assert_eq!(
            a.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
