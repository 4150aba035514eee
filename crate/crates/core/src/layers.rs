//! Parameterized building blocks shared by the composite modules.

use crate::autodiff::{Module, Param, Var};
use crate::error::Result;
use crate::ops::Conv2dSpec;
use crate::rng;
use crate::tensor::Tensor;

/// How parameters are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Init {
    /// Usual starting point: Gaussian weights, constant or zero where a layer
    /// is meant to start inert.
    #[default]
    Standard,
    /// Every parameter random, including those normally zero or one. Used to
    /// make gradient checks and dead-parameter checks non-degenerate.
    Randomized,
}

#[derive(Clone, Copy, Debug)]
pub enum Fill {
    Normal(f64),
    Zeros,
    Const(f64),
}

/// Seeded parameter factory. Each parameter draws from a stream keyed by its
/// full name, so values do not depend on construction order.
#[derive(Clone, Copy, Debug)]
pub struct Initializer {
    pub seed: u64,
    pub mode: Init,
}

impl Initializer {
    pub fn new(seed: u64, mode: Init) -> Self {
        Initializer { seed, mode }
    }

    pub fn param(&self, name: &str, shape: Vec<usize>, fill: Fill) -> Param {
        let mut r = rng::stream(self.seed, name);
        let value = match (self.mode, fill) {
            (_, Fill::Normal(std)) => Tensor::randn(shape, std, &mut r),
            (Init::Standard, Fill::Zeros) => Tensor::zeros(shape),
            (Init::Standard, Fill::Const(v)) => Tensor::full(shape, v),
            (Init::Randomized, Fill::Zeros) => Tensor::randn(shape, 0.2, &mut r),
            (Init::Randomized, Fill::Const(v)) => Tensor::randn(shape, 0.2, &mut r).map(|e| e + v),
        };
        Param::new(name, value)
    }
}

/// He-style standard deviation for `fan_in` inputs.
pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// Square kernel `k` with "same"-style padding `k / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin / groups * k * k;
        Conv2d {
            weight: init.param(&format!("{name}.weight"), vec![cout, cin / groups, k, k], Fill::Normal(he_std(fan_in))),
            bias: bias.then(|| init.param(&format!("{name}.bias"), vec![cout], Fill::Zeros)),
            spec: Conv2dSpec::new(stride, k / 2, groups),
        }
    }

    /// Same as [`Conv2d::new`] but with the weight filled by `fill`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_fill(
        init: &Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        fill: Fill,
    ) -> Self {
        let mut c = Self::new(init, name, cin, cout, k, stride, groups, bias);
        c.weight = init.param(&format!("{name}.weight"), vec![cout, cin / groups, k, k], fill);
        c
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let w = tape.param(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.param(b));
        x.conv2d(&w, b.as_ref(), self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().dim(0)
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().dim(2)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Layer normalization over one axis (channels of NCHW by default).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub axis: usize,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(init: &Initializer, name: &str, channels: usize, axis: usize) -> Self {
        LayerNorm {
            gamma: init.param(&format!("{name}.gamma"), vec![channels], Fill::Const(1.0)),
            beta: init.param(&format!("{name}.beta"), vec![channels], Fill::Zeros),
            axis,
            eps: LN_EPS,
        }
    }

    /// Over the channel axis of an NCHW tensor.
    pub fn channels(init: &Initializer, name: &str, channels: usize) -> Self {
        Self::new(init, name, channels, 1)
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        x.layer_norm(&tape.param(&self.gamma), &tape.param(&self.beta), self.axis, self.eps)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// (in, out).
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(init: &Initializer, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            weight: init.param(&format!("{name}.weight"), vec![din, dout], Fill::Normal(1.0 / (din as f64).sqrt())),
            bias: bias.then(|| init.param(&format!("{name}.bias"), vec![dout], Fill::Zeros)),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let b = self.bias.as_ref().map(|b| tape.param(b));
        x.linear(&tape.param(&self.weight), b.as_ref())
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Collects the parameters of several modules.
pub fn collect<'a>(mods: impl IntoIterator<Item = &'a dyn Module>) -> Vec<&'a Param> {
    mods.into_iter().flat_map(|m| m.params()).collect()
}
