//! Pointwise nonlinearities and their derivatives.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autodiff::Var;
use crate::tensor::Tensor;

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `log(1 + e^x)`, written as `max(x, 0) + log1p(e^-|x|)` so it never overflows.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn softplus_grad(x: f64) -> f64 {
    sigmoid(x)
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn unary<'t>(
    x: &Var<'t>,
    op: &'static str,
    f: fn(f64) -> f64,
    df: fn(f64) -> f64,
) -> Var<'t> {
    let out = x.value().map(f);
    let input = x.value_arc();
    x.tape().record(op, &[x], out, move |g| {
        vec![Some(g.zip_map(&input, |g, x| g * df(x)).expect("same shape"))]
    })
}

impl<'t> Var<'t> {
    pub fn gelu(&self) -> Var<'t> {
        unary(self, "gelu", gelu, gelu_grad)
    }

    pub fn silu(&self) -> Var<'t> {
        unary(self, "silu", silu, silu_grad)
    }

    pub fn softplus(&self) -> Var<'t> {
        unary(self, "softplus", softplus, softplus_grad)
    }
}

pub fn gelu_tensor(x: &Tensor) -> Tensor {
    x.map(gelu)
}

pub fn silu_tensor(x: &Tensor) -> Tensor {
    x.map(silu)
}

pub fn softplus_tensor(x: &Tensor) -> Tensor {
    x.map(softplus)
}
