//! Layer normalization along one axis.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

/// Splits `shape` around `axis` into (outer, len, inner).
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor, axis: usize, eps: f64) -> Result<(usize, usize, usize)> {
    const OP: &str = "layernorm";
    if axis >= x.rank() {
        return Err(Error::shape(OP, "axis", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let c = x.dim(axis);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            OP,
            "affine parameters",
            format!("expected [{c}], got gamma {:?} beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    if !(eps >= 0.0) {
        return Err(Error::invalid(OP, format!("eps must be non-negative, got {eps}")));
    }
    Ok(split(x.shape(), axis))
}

/// Normalized values `x̂` and per-position reciprocal std, both needed by the backward rule.
fn standardize(x: &Tensor, outer: usize, c: usize, inner: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let block = c * inner;
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; outer * inner];
    xhat.par_chunks_mut(block.max(1))
        .zip(rstd.par_chunks_mut(inner.max(1)))
        .enumerate()
        .for_each(|(o, (xh, rs))| {
            let xb = &x.data()[o * block..][..block];
            let mut buf = vec![0.0; c];
            for i in 0..inner {
                for k in 0..c {
                    buf[k] = xb[k * inner + i];
                }
                let mean = pairwise_sum(&buf) / c as f64;
                for v in buf.iter_mut() {
                    *v = (*v - mean) * (*v - mean);
                }
                let var = pairwise_sum(&buf) / c as f64;
                let r = 1.0 / (var + eps).sqrt();
                rs[i] = r;
                for k in 0..c {
                    xh[k * inner + i] = (xb[k * inner + i] - mean) * r;
                }
            }
        });
    (xhat, rstd)
}

fn affine(xhat: &[f64], gamma: &Tensor, beta: &Tensor, c: usize, inner: usize, shape: &[usize]) -> Tensor {
    let data = xhat
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let k = (idx / inner) % c;
            v * gamma.data()[k] + beta.data()[k]
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta` along `axis`, biased variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
    let (outer, c, inner) = check(x, gamma, beta, axis, eps)?;
    let (xhat, _) = standardize(x, outer, c, inner, eps);
    Ok(affine(&xhat, gamma, beta, c, inner, x.shape()))
}

/// Over the last axis, for `(…, C)` tensors.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::shape("layernorm", "rank", "scalar input"));
    }
    layer_norm(x, gamma, beta, x.rank() - 1, eps)
}

fn backward(
    g: &Tensor,
    xhat: &[f64],
    rstd: &[f64],
    gamma: &Tensor,
    (outer, c, inner): (usize, usize, usize),
) -> (Tensor, Tensor, Tensor) {
    let block = c * inner;
    let gd = g.data();
    let mut dx = vec![0.0; g.numel()];
    dx.par_chunks_mut(block.max(1)).enumerate().for_each(|(o, dxb)| {
        let gb = &gd[o * block..][..block];
        let xb = &xhat[o * block..][..block];
        let mut d1 = vec![0.0; c];
        let mut d2 = vec![0.0; c];
        for i in 0..inner {
            for k in 0..c {
                let dxh = gb[k * inner + i] * gamma.data()[k];
                d1[k] = dxh;
                d2[k] = dxh * xb[k * inner + i];
            }
            let m1 = pairwise_sum(&d1) / c as f64;
            let m2 = pairwise_sum(&d2) / c as f64;
            let r = rstd[o * inner + i];
            for k in 0..c {
                dxb[k * inner + i] = r * (d1[k] - m1 - xb[k * inner + i] * m2);
            }
        }
    });

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut pg = vec![0.0; outer];
    let mut pb = vec![0.0; outer];
    let mut bg = vec![0.0; inner];
    let mut bb = vec![0.0; inner];
    for k in 0..c {
        for o in 0..outer {
            let base = o * block + k * inner;
            for i in 0..inner {
                bg[i] = gd[base + i] * xhat[base + i];
                bb[i] = gd[base + i];
            }
            pg[o] = pairwise_sum(&bg);
            pb[o] = pairwise_sum(&bb);
        }
        dgamma[k] = pairwise_sum(&pg);
        dbeta[k] = pairwise_sum(&pb);
    }
    (
        Tensor::from_parts(g.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

impl<'t> Var<'t> {
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, axis: usize, eps: f64) -> Result<Var<'t>> {
        let dims = check(self.value(), gamma.value(), beta.value(), axis, eps)?;
        let (outer, c, inner) = dims;
        let (xhat, rstd) = standardize(self.value(), outer, c, inner, eps);
        let out = affine(&xhat, gamma.value(), beta.value(), c, inner, self.shape());
        let gam = gamma.value_arc();
        Ok(self.tape().record("layer_norm", &[self, gamma, beta], out, move |g| {
            let (dx, dg, db) = backward(g, &xhat, &rstd, &gam, dims);
            vec![Some(dx), Some(dg), Some(db)]
        }))
    }
}
