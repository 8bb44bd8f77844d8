//! Named parameter storage and the convolution layers built on it.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered collection of trainable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { params: Vec::new() }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    pub fn bit_eq(&self, other: &ParamSet<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }
}

/// Tape handles for a [`ParamSet`], one per parameter.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// How a new parameter tensor is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// uniform(-1/√fan_in, 1/√fan_in)
    FanIn(usize),
    Zero,
}

/// Allocates parameters into a [`ParamSet`] under a dotted name prefix.
///
/// Random values are drawn at `f32` precision whatever `T` is, so a model
/// initialised in `f64` survives an `f32` checkpoint unchanged.
pub struct ParamBuilder<'a, T> {
    set: &'a mut ParamSet<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            set,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        ParamBuilder {
            set: self.set,
            rng: self.rng,
            prefix: format!("{}{name}.", self.prefix),
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::Zero => Tensor::zeros(shape.to_vec()),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| {
                    T::lit(self.rng.random_range(-bound..bound) as f64)
                })
            }
        };
        self.set.push(format!("{}{name}", self.prefix), value)
    }

    /// `[cout, cin, k, k]` weight and `[cout]` bias, padding `(k-1)/2`.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) -> Conv2d {
        let init = if zero { Init::Zero } else { Init::FanIn(cin * k * k) };
        let mut s = self.scope(name);
        Conv2d {
            weight: s.tensor("weight", &[cout, cin, k, k], init),
            bias: s.tensor("bias", &[cout], init),
            padding: (k - 1) / 2,
        }
    }

    /// `[c, 1, 3, 3]` weight and `[c]` bias.
    pub fn depthwise(&mut self, name: &str, channels: usize) -> DepthwiseConv {
        let init = Init::FanIn(9);
        let mut s = self.scope(name);
        DepthwiseConv {
            weight: s.tensor("weight", &[channels, 1, 3, 3], init),
            bias: s.tensor("bias", &[channels], init),
        }
    }
}

/// Size-preserving convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv2d {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        tape.conv2d(x, b[self.weight], Some(b[self.bias]), self.padding)
    }

    pub fn out_channels<T: Real>(&self, params: &ParamSet<T>) -> usize {
        params.get(self.weight).value.shape()[0]
    }
}

/// 3×3 per-channel convolution with padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConv {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<Var> {
        tape.depthwise_conv2d(x, b[self.weight], Some(b[self.bias]), 1)
    }
}

/// Checks that `x` is `[channels, H, W]`.
pub(crate) fn expect_channels<T: Real>(tape: &Tape<T>, x: Var, channels: usize, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[0] != channels {
        return Err(Error::dim(format!(
            "{what} expects [{channels},H,W], got {s:?}"
        )));
    }
    Ok(())
}
