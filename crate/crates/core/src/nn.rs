//! Parameterized layers over a shared [`ParamStore`].

use numkernel::ops::{self, ConvSpec};
use numkernel::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn init_uniform<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    store.add(name, Tensor::uniform(shape, -bound, bound, rng))
}

pub fn init_const(store: &mut ParamStore, name: &str, shape: &[usize], value: f64) -> ParamId {
    store.add(name, Tensor::full(shape, value))
}

/// 3-D convolution layer over `[C, D, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let cin_g = cin / spec.groups;
        let fan_in = cin_g * kernel.iter().product::<usize>();
        let weight = init_uniform(store, rng, &format!("{name}.weight"), &[cout, cin_g, kernel[0], kernel[1], kernel[2]], fan_in);
        let bias = bias.then(|| init_uniform(store, rng, &format!("{name}.bias"), &[cout], fan_in));
        Self { weight, bias, spec }
    }

    /// Stride-1 "same" convolution with a cubic kernel.
    pub fn same<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(store, rng, name, cin, cout, [k; 3], ConvSpec::same([k; 3]), true)
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(ops::conv3d(g, x, w, b, &self.spec)?)
    }
}

/// 2-D convolution layer over `[C, H, W]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan_in = cin * k * k;
        let weight = init_uniform(store, rng, &format!("{name}.weight"), &[cout, cin, k, k], fan_in);
        let bias = Some(init_uniform(store, rng, &format!("{name}.bias"), &[cout], fan_in));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(ops::conv2d(g, x, w, b, self.stride, self.pad, 1)?)
    }
}

/// `x·W + b` on `[n, d_in]` tokens.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = init_uniform(store, rng, &format!("{name}.weight"), &[d_in, d_out], d_in);
        let bias = bias.then(|| init_uniform(store, rng, &format!("{name}.bias"), &[d_out], d_in));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(ops::linear(g, x, w, b)?)
    }
}

/// Inserts a unit axis at `axis`.
pub fn unsqueeze(g: &Graph, x: Var, axis: usize) -> Result<Var> {
    let mut s = g.shape(x);
    s.insert(axis, 1);
    Ok(g.reshape(x, &s)?)
}
