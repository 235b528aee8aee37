use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::Tensor;

/// Architectural block a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Text,
    Image,
    Fusion,
    Attention,
    Classifier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Ordered, named parameter list. Order is the registration order and is
/// what the optimizer and checkpoint files rely on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub(crate) fn push(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Total scalar count of the parameters in `group`.
    pub fn numel(&self, group: Group) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn total_numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Uniform in `±sqrt(6 / fan_in)`, suited to layers feeding a ReLU.
pub(crate) fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Uniform in `±1/sqrt(fan_in)`, for layers without a following ReLU.
pub(crate) fn lecun_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}
