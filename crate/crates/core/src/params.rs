//! Parameter containers.
//!
//! Every container is generic over its leaf: `Tensor<T>` for stored weights,
//! [`TensorId`] once bound into a [`Graph`]. `map` walks the leaves in a
//! fixed order under dotted names, which is what checkpoints, optimizers and
//! graph binding all rely on.

use rand::Rng;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensorcore::{Graph, Tensor, TensorId};

/// Affine map over the last axis, `weight: [c_in, c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: Option<P>,
}

/// LayerNorm gain and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gain: P,
    pub bias: P,
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), b);
        }
    }
}

impl<P> Norm<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Norm<Q> {
        Norm {
            gain: f(&join(prefix, "gain"), &self.gain),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> Linear<Tensor<T>> {
    /// Symmetric uniform fan-in initialization, `U(-1/√c_in, 1/√c_in)`.
    pub fn init(c_in: usize, c_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        let mut draw = |shape: Vec<usize>| Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        let weight = draw(vec![c_in, c_out]);
        let bias = bias.then(|| draw(vec![c_out]));
        Self { weight, bias }
    }

    pub fn zeros(c_in: usize, c_out: usize, bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(vec![c_in, c_out]),
            bias: bias.then(|| Tensor::zeros(vec![c_out])),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Tensor::numel)
    }
}

impl<T: Scalar> Norm<Tensor<T>> {
    pub fn init(c: usize) -> Self {
        Self {
            gain: Tensor::full(vec![c], T::one()),
            bias: Tensor::zeros(vec![c]),
        }
    }
}

impl Linear<TensorId> {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: TensorId) -> Result<TensorId> {
        g.linear(x, self.weight, self.bias)
    }
}

impl Norm<TensorId> {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: TensorId) -> Result<TensorId> {
        g.layer_norm(x, self.gain, self.bias, T::of(crate::tensorcore::LAYER_NORM_EPS))
    }
}
