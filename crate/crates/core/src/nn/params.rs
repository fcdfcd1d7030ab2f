use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Shape, Tensor};

/// What a stored tensor is used for. The optimizer keys weight decay and
/// trainability off this.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Convolution kernel; the only role that receives weight decay.
    ConvWeight,
    /// Dense projection matrix inside attention / MLP layers.
    LinearWeight,
    Bias,
    /// Affine terms of batch / layer normalisation.
    Norm,
    /// Raw fusion weights and implicit head vectors.
    Scale,
    /// Running statistics; never trained.
    Buffer,
}

impl Role {
    pub fn trainable(self) -> bool {
        self != Role::Buffer
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`, the default for conv and linear layers.
    FanIn(usize),
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    pub role: Role,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Shape>, init: Init, role: Role) -> Self {
        ParamSpec { name: name.into(), shape: shape.into(), init, role }
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub role: Role,
}

/// Named tensors of a network in declaration order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    /// Allocates and initialises every spec from a seeded stream, in order.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for spec in specs {
            let value = match spec.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(spec.shape, |_| T::cast_f64(rng.random_range(-bound..bound)))
                }
                Init::Const(v) => Tensor::full(spec.shape, T::cast_f64(v)),
            };
            store.insert(&spec.name, value, spec.role)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, role: Role) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter path `{name}`")));
        }
        self.entries.insert(name.to_string(), Param { value, role });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.tensor_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}`: cannot replace {:?} with {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.entries.shift_remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn num_trainable(&self) -> usize {
        self.entries.values().filter(|p| p.role.trainable()).map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.cast(), role: p.role }))
                .collect(),
        }
    }
}

/// Trainable scalar count implied by a spec list, without allocating.
pub fn count_trainable(specs: &[ParamSpec]) -> usize {
    specs.iter().filter(|s| s.role.trainable()).map(|s| s.shape.numel()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let specs = vec![
            ParamSpec::new("a.weight", [4, 3, 3, 3], Init::FanIn(27), Role::ConvWeight),
            ParamSpec::new("a.bias", [1, 4, 1, 1], Init::Const(0.0), Role::Bias),
        ];
        let p1 = ParamStore::<f32>::from_specs(&specs, 3).unwrap();
        let p2 = ParamStore::<f32>::from_specs(&specs, 3).unwrap();
        let p3 = ParamStore::<f32>::from_specs(&specs, 4).unwrap();
        assert_eq!(p1.tensor("a.weight").unwrap(), p2.tensor("a.weight").unwrap());
        assert_ne!(p1.tensor("a.weight").unwrap(), p3.tensor("a.weight").unwrap());
        let bound = 1.0 / 27f32.sqrt();
        assert!(p1.tensor("a.weight").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert_eq!(count_trainable(&specs), 4 * 27 + 4);
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let specs = vec![
            ParamSpec::new("x", [1, 1, 1, 1], Init::Const(1.0), Role::Bias),
            ParamSpec::new("x", [1, 1, 1, 1], Init::Const(1.0), Role::Bias),
        ];
        assert!(matches!(ParamStore::<f32>::from_specs(&specs, 0), Err(Error::Config(_))));
    }
}
