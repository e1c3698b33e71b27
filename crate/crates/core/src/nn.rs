//! Named parameters, per-forward binding to a tape, and the two dense layers
//! every other module builds on.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Insertion-ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.tensors.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    /// Copy with every value rounded through `f32`, the checkpoint precision.
    pub fn rounded_to_f32(&self) -> ParamStore {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        out
    }
}

/// Binds parameters of a store onto a tape, lazily and at most once each.
pub struct Ctx<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'t, 's> Ctx<'t, 's> {
    /// Parameters enter the tape as gradient-tracking leaves.
    pub fn train(tape: &'t mut Tape, store: &'s ParamStore) -> Self {
        Ctx { tape, store, bound: vec![None; store.len()], trainable: true }
    }

    /// Parameters enter the tape as constants.
    pub fn eval(tape: &'t mut Tape, store: &'s ParamStore) -> Self {
        Ctx { tape, store, bound: vec![None; store.len()], trainable: false }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = self.tape.leaf(value, self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses an existing tape node in place of a stored parameter.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient of every parameter touched by the forward pass, indexed by id.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound.iter().map(|b| b.and_then(|v| self.tape.grad(v)).map(<[f64]>::to_vec)).collect()
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// He normal with standard deviation `gain * sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
    Normal(f64),
}

impl Init {
    pub fn tensor(self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Kaiming { fan_in, gain } => {
                let std = gain * (2.0 / fan_in as f64).sqrt();
                (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>()
            }
            Init::Normal(std) => (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>(),
        };
        Tensor::new(shape.to_vec(), data).expect("shape and data built together")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// `same`-style padding (`kernel / 2`), He-initialised weights, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::with_init(store, name, cin, cout, kernel, stride, Init::Kaiming { fan_in: cin * kernel * kernel, gain: 1.0 }, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.tensor(&[cout, cin, kernel, kernel], rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Conv2d { weight, bias, in_channels: cin, out_channels: cout, kernel, stride, padding: kernel / 2 }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Multiply-accumulates for one image of input size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_size(h, w);
        (oh * ow * self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
    }
}

/// Group normalisation with a per-channel affine `gamma * x_hat + beta`.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, gamma: f64) -> Self {
        let g = store.add(format!("{name}.gamma"), Tensor::full(vec![channels], gamma));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        GroupNorm { gamma: g, beta, groups, channels, eps: Self::EPS }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = ctx.tape.group_norm(x, self.groups, self.eps)?;
        let g = ctx.param(self.gamma);
        let g = ctx.tape.reshape(g, &[1, self.channels, 1, 1])?;
        let b = ctx.param(self.beta);
        let b = ctx.tape.reshape(b, &[1, self.channels, 1, 1])?;
        let y = ctx.tape.mul(y, g)?;
        ctx.tape.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, e: usize, init: Init, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), init.tensor(&[d, e], rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![e]));
        Linear { weight, bias, in_features: d, out_features: e }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ctx_binds_each_parameter_once() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 1, 2, 3, 1, &mut rng);
        let mut tape = Tape::new();
        let mut ctx = Ctx::train(&mut tape, &store);
        let x = ctx.tape.constant(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let y1 = conv.forward(&mut ctx, x).unwrap();
        let y2 = conv.forward(&mut ctx, x).unwrap();
        let s = ctx.tape.add(y1, y2).unwrap();
        let l = ctx.tape.sum_all(s);
        ctx.tape.backward(l).unwrap();
        let grads = ctx.param_grads();
        assert_eq!(grads.len(), 2);
        // bias gradient: two uses over 16 output cells each
        assert_eq!(grads[conv.bias.index()].as_ref().unwrap(), &vec![32.0, 32.0]);
    }

    #[test]
    fn conv_macs_golden() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 16, 32, 3, 1, &mut rng);
        assert_eq!(conv.macs(8, 8), 294_912);
    }
}
