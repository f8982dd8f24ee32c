use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<R> {
    name: String,
    value: Tensor<R>,
    grad: Option<Vec<R>>,
    frozen: bool,
}

impl<R: Real> Param<R> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<R> {
        &self.value
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

/// Named parameter registry. Models hold [`ParamId`]s; values, gradients
/// and the frozen flag live here.
#[derive(Clone, Debug)]
pub struct ParamStore<R: Real = f32> {
    params: Vec<Param<R>>,
    by_name: HashMap<String, ParamId>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            frozen: false,
        });
        Ok(id)
    }

    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        self.add(name, normal_tensor(shape, std, rng))
    }

    pub fn get(&self, id: ParamId) -> &Param<R> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&[R]> {
        self.params[id.0].grad.as_deref()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Add the gradients of every parameter bound on `tape` into the store.
    pub fn accumulate_grads(&mut self, tape: &Tape<R>) {
        for (id, g) in tape.param_grads() {
            let Some(g) = g else { continue };
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
                None => p.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = R::from_f64_lossy(max_norm / norm);
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    pub(crate) fn take_grad(&mut self, id: ParamId) -> Option<Vec<R>> {
        self.params[id.0].grad.take()
    }

    pub(crate) fn restore_grad(&mut self, id: ParamId, grad: Vec<R>) {
        self.params[id.0].grad = Some(grad);
    }
}

pub fn normal_tensor<R: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = if std == 0.0 {
        vec![R::zero(); n]
    } else {
        let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
        (0..n)
            .map(|_| R::from_f64_lossy(dist.sample(rng)))
            .collect()
    };
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}
