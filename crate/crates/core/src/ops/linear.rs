//! Matrix product over the last axis: `(…, in) × (in, out) → (…, out)`.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::macs;
use crate::tensor::{pairwise_sum, Tensor};

fn dims(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize, usize)> {
    const OP: &str = "linear";
    let (din, dout) = match w.shape() {
        &[a, b] => (a, b),
        s => return Err(Error::shape(OP, "weight rank", format!("expected (in, out), got {s:?}"))),
    };
    let last = x.shape().last().copied().unwrap_or(0);
    if x.rank() == 0 || last != din {
        return Err(Error::shape(OP, "input features", format!("input {:?} vs weight {:?}", x.shape(), w.shape())));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape(OP, "bias", format!("expected [{dout}], got {:?}", b.shape())));
        }
    }
    Ok((x.numel() / din.max(1), din, dout))
}

pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, din, dout) = dims(x, w, bias)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; rows * dout];
    out.par_chunks_mut(dout.max(1))
        .with_min_len(16)
        .enumerate()
        .for_each(|(r, orow)| {
            if let Some(b) = bias {
                orow.copy_from_slice(b.data());
            }
            let xr = &xd[r * din..][..din];
            for i in 0..din {
                let a = xr[i];
                let wr = &wd[i * dout..][..dout];
                for o in 0..dout {
                    orow[o] += a * wr[o];
                }
            }
        });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = dout;
    Ok(Tensor::from_parts(shape, out))
}

fn linear_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let din = w.dim(0);
    let dout = w.dim(1);
    let rows = x.numel() / din.max(1);
    let (xd, wd, gd) = (x.data(), w.data(), g.data());

    let mut dx = vec![0.0; x.numel()];
    dx.par_chunks_mut(din.max(1)).with_min_len(16).enumerate().for_each(|(r, dxr)| {
        let gr = &gd[r * dout..][..dout];
        for i in 0..din {
            let wr = &wd[i * dout..][..dout];
            let mut acc = 0.0;
            for o in 0..dout {
                acc += gr[o] * wr[o];
            }
            dxr[i] = acc;
        }
    });

    let mut dw = vec![0.0; w.numel()];
    dw.par_chunks_mut(dout.max(1)).enumerate().for_each(|(i, dwr)| {
        for r in 0..rows {
            let a = xd[r * din + i];
            let gr = &gd[r * dout..][..dout];
            for o in 0..dout {
                dwr[o] += a * gr[o];
            }
        }
    });

    let mut col = vec![0.0; rows];
    let db = (0..dout)
        .map(|o| {
            for r in 0..rows {
                col[r] = gd[r * dout + o];
            }
            pairwise_sum(&col)
        })
        .collect();

    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![dout], db),
    )
}

impl<'t> Var<'t> {
    pub fn linear(&self, w: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let out = linear(self.value(), w.value(), bias.map(|b| b.value()))?;
        let (rows, din, dout) = dims(self.value(), w.value(), None)?;
        macs::add((rows * din * dout) as u64);
        let (x, wt) = (self.value_arc(), w.value_arc());
        let has_bias = bias.is_some();
        let backward = move |g: &Tensor| {
            let (dx, dw, db) = linear_backward(&x, &wt, g);
            let mut v = vec![Some(dx), Some(dw)];
            if has_bias {
                v.push(Some(db));
            }
            v
        };
        Ok(match bias {
            Some(b) => self.tape().record("linear", &[self, w, b], out, backward),
            None => self.tape().record("linear", &[self, w], out, backward),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_layout() {
        // single layer C_in x C_out + bias: 3*2 + 2 values
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        assert_eq!(w.numel() + b.numel(), 3 * 2 + 2);
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[4.5, 4.5]);
    }

    #[test]
    fn batched_shape() {
        let x = Tensor::zeros(vec![2, 5, 4]);
        let w = Tensor::zeros(vec![4, 7]);
        assert_eq!(linear(&x, &w, None).unwrap().shape(), &[2, 5, 7]);
        assert!(linear(&x, &Tensor::zeros(vec![5, 7]), None).is_err());
    }
}
