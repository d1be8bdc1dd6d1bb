use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named learnable tensors owned by one model instance, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking names and shapes line up.
    pub fn load(&mut self, tensors: &[Tensor<T>]) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (dst, src) in self.tensors.iter_mut().zip(tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("load", dst.shape(), src.shape()));
            }
            dst.clone_from(src);
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A forward pass in progress: a fresh tape plus lazily bound parameter leaves.
pub struct Session<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'p, T: Real> Session<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    /// Leaf for parameter `id`, recorded once per session.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), true);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    /// Backpropagates from `loss` and adds parameter gradients into `acc`
    /// (aligned with the store). Unused parameters receive nothing.
    pub fn accumulate_grads(&self, loss: Var, acc: &mut [Tensor<T>]) -> Result<()> {
        let grads: Gradients<T> = self.tape.backward(loss)?;
        for (slot, bound) in acc.iter_mut().zip(&self.bound) {
            if let Some(g) = bound.and_then(|v| grads.get(v)) {
                for (a, &b) in slot.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}
