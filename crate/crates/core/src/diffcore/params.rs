use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;

use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered collection of trainable tensors with gradient
/// accumulators.
#[derive(Debug)]
pub struct ParameterStore {
    uid: u64,
    params: IndexMap<String, Parameter>,
}

impl Clone for ParameterStore {
    fn clone(&self) -> Self {
        ParameterStore {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            uid: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: IndexMap::new(),
        }
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.params.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        let (idx, _) = self.params.insert_full(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                value,
                grad,
            },
        );
        Ok(ParamId(idx))
    }

    /// Weight matrix `[fan_in, fan_out]`, Glorot-uniform:
    /// bound sqrt(6 / (fan_in + fan_out)).
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        self.insert(name, Tensor::new(&[fan_in, fan_out], data)?)
    }

    pub fn bias(&mut self, name: &str, n: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(&[n]))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.grad.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.values_mut() {
                p.grad.scale_assign(s);
            }
        }
        norm
    }

    /// Copy values from `other`, requiring identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<()> {
        for (name, p) in &self.params {
            match other.params.get(name) {
                None => {
                    return Err(Error::Migration(format!("parameter {name} missing from source")))
                }
                Some(q) if q.value.shape() != p.value.shape() => {
                    return Err(Error::Migration(format!(
                        "parameter {name}: expected shape {:?}, found {:?}",
                        p.value.shape(),
                        q.value.shape()
                    )))
                }
                _ => {}
            }
        }
        if other.len() != self.len() {
            let extra: Vec<&String> = other
                .params
                .keys()
                .filter(|k| !self.params.contains_key(*k))
                .collect();
            return Err(Error::Migration(format!("unexpected parameters in source: {extra:?}")));
        }
        for (name, p) in self.params.iter_mut() {
            p.value = other.params[name].value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_init() {
        let build = |seed| {
            let mut rng = Rng::new(seed);
            let mut s = ParameterStore::new();
            s.weight("w", 4, 3, &mut rng).unwrap();
            s.bias("b", 3).unwrap();
            s
        };
        let a = build(5);
        let b = build(5);
        assert_eq!(a.by_name("w").unwrap().value, b.by_name("w").unwrap().value);
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.by_name("w").unwrap().value.data().iter().all(|v| v.abs() <= bound));
        assert!(a.by_name("b").unwrap().value.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn names_are_unique() {
        let mut s = ParameterStore::new();
        s.bias("b", 2).unwrap();
        assert!(s.bias("b", 2).is_err());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut s = ParameterStore::new();
        let id = s.bias("b", 2).unwrap();
        s.get_mut(id).grad = Tensor::vector(vec![3.0, 4.0]);
        let before = s.clip_grad_norm(1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_rejects_shape_change() {
        let mut rng = Rng::new(0);
        let mut a = ParameterStore::new();
        a.weight("w", 2, 2, &mut rng).unwrap();
        let mut b = ParameterStore::new();
        b.weight("w", 3, 2, &mut rng).unwrap();
        assert!(matches!(a.load_values_from(&b), Err(Error::Migration(_))));
    }
}
