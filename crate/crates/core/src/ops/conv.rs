//! Grouped 2D cross-correlation over NCHW tensors with zero padding.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::macs;
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Conv2dSpec { stride, pad, groups }
    }

    /// Stride 1 with "same" padding for an odd kernel `k`.
    pub fn same(k: usize, groups: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            pad: k / 2,
            groups,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
    s: usize,
    p: usize,
}

impl Geometry {
    /// Output columns `ox` whose input column `ox*s + kx - p` lies in `[0, w)`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.p > kx {
            (self.p - kx).div_ceil(self.s)
        } else {
            0
        };
        let hi = if self.w + self.p > kx {
            ((self.w - 1 + self.p - kx) / self.s + 1).min(self.wo)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.s + ky).checked_sub(self.p)?;
        (iy < self.h).then_some(iy)
    }
}

fn geometry(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let (n, c, h, wd) = x.dims4(OP)?;
    let (co, cig, kh, kw) = match w.shape() {
        &[a, b, c, d] => (a, b, c, d),
        s => return Err(Error::shape(OP, "weight rank", format!("expected (C_out, C_in/groups, k, k), got {s:?}"))),
    };
    if spec.groups == 0 || spec.stride == 0 {
        return Err(Error::invalid(OP, "groups and stride must be positive"));
    }
    if c % spec.groups != 0 {
        return Err(Error::shape(OP, "input channels", format!("C={c} not divisible by groups={}", spec.groups)));
    }
    if co % spec.groups != 0 {
        return Err(Error::shape(OP, "output channels", format!("C_out={co} not divisible by groups={}", spec.groups)));
    }
    if cig != c / spec.groups {
        return Err(Error::shape(
            OP,
            "weight input channels",
            format!("weight has {cig} per group, input provides {}", c / spec.groups),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(OP, "kernel size", format!("kernel must be odd-sized, got {kh}x{kw}")));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(OP, "bias", format!("expected [{co}], got {:?}", b.shape())));
        }
    }
    if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
        return Err(Error::shape(OP, "spatial extent", format!("{h}x{wd} with pad {} smaller than kernel {kh}x{kw}", spec.pad)));
    }
    Ok(Geometry {
        n,
        c,
        h,
        w: wd,
        co,
        kh,
        kw,
        ho: (h + 2 * spec.pad - kh) / spec.stride + 1,
        wo: (wd + 2 * spec.pad - kw) / spec.stride + 1,
        cig,
        cog: co / spec.groups,
        s: spec.stride,
        p: spec.pad,
    })
}

/// Output spatial size for an input extent.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
    let g = geometry(x, w, bias, spec)?;
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; g.n * g.co * plane_out];
    out.par_chunks_mut(plane_out.max(1))
        .enumerate()
        .for_each(|(idx, plane)| {
            let (n, co) = (idx / g.co, idx % g.co);
            if let Some(b) = bias {
                plane.fill(b.data()[co]);
            }
            let grp = co / g.cog;
            for ci_l in 0..g.cig {
                let ci = grp * g.cig + ci_l;
                let xin = &xd[(n * g.c + ci) * plane_in..][..plane_in];
                let wk = &wd[(co * g.cig + ci_l) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let row_in = &xin[iy * g.w..][..g.w];
                            let row_out = &mut plane[oy * g.wo..][..g.wo];
                            if g.s == 1 {
                                let off = kx as isize - g.p as isize;
                                for ox in lo..hi {
                                    row_out[ox] += wv * row_in[(ox as isize + off) as usize];
                                }
                            } else {
                                for ox in lo..hi {
                                    row_out[ox] += wv * row_in[ox * g.s + kx - g.p];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(Tensor::from_parts(vec![g.n, g.co, g.ho, g.wo], out))
}

/// Gradients `(dx, dw, db)` of [`conv2d`] given the output gradient.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    spec: Conv2dSpec,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = geometry(x, w, None, spec)?;
    if gout.shape() != [g.n, g.co, g.ho, g.wo] {
        return Err(Error::shape("conv2d_backward", "output gradient", format!("{:?}", gout.shape())));
    }
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());

    let mut dx = vec![0.0; x.numel()];
    dx.par_chunks_mut(plane_in.max(1)).enumerate().for_each(|(idx, plane)| {
        let (n, ci) = (idx / g.c, idx % g.c);
        let grp = ci / g.cig;
        let ci_l = ci % g.cig;
        for co in grp * g.cog..(grp + 1) * g.cog {
            let gp = &gd[(n * g.co + co) * plane_out..][..plane_out];
            let wk = &wd[(co * g.cig + ci_l) * g.kh * g.kw..][..g.kh * g.kw];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    let (lo, hi) = g.col_range(kx);
                    for oy in 0..g.ho {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let row = &mut plane[iy * g.w..][..g.w];
                        let grow = &gp[oy * g.wo..][..g.wo];
                        for ox in lo..hi {
                            row[ox * g.s + kx - g.p] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });

    let ksz = g.cig * g.kh * g.kw;
    let mut dw = vec![0.0; w.numel()];
    dw.par_chunks_mut(ksz.max(1)).enumerate().for_each(|(co, wchunk)| {
        let grp = co / g.cog;
        for ci_l in 0..g.cig {
            let ci = grp * g.cig + ci_l;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = 0.0;
                    for n in 0..g.n {
                        let gp = &gd[(n * g.co + co) * plane_out..][..plane_out];
                        let xin = &xd[(n * g.c + ci) * plane_in..][..plane_in];
                        for oy in 0..g.ho {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let row = &xin[iy * g.w..][..g.w];
                            let grow = &gp[oy * g.wo..][..g.wo];
                            for ox in lo..hi {
                                acc += grow[ox] * row[ox * g.s + kx - g.p];
                            }
                        }
                    }
                    wchunk[(ci_l * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });

    let db: Vec<f64> = (0..g.co)
        .map(|co| {
            let per_n: Vec<f64> = (0..g.n)
                .map(|n| pairwise_sum(&gd[(n * g.co + co) * plane_out..][..plane_out]))
                .collect();
            pairwise_sum(&per_n)
        })
        .collect();

    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(w.shape().to_vec(), dw),
        Tensor::from_parts(vec![g.co], db),
    ))
}

pub fn conv2d_macs(x_shape: &[usize], w_shape: &[usize], spec: Conv2dSpec) -> u64 {
    let (n, h, wd) = (x_shape[0], x_shape[2], x_shape[3]);
    let (co, cig, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let ho = conv_out_dim(h, kh, spec.stride, spec.pad);
    let wo = conv_out_dim(wd, kw, spec.stride, spec.pad);
    (n * co * ho * wo * cig * kh * kw) as u64
}

impl<'t> Var<'t> {
    pub fn conv2d(&self, w: &Var<'t>, bias: Option<&Var<'t>>, spec: Conv2dSpec) -> Result<Var<'t>> {
        let out = conv2d(self.value(), w.value(), bias.map(|b| b.value()), spec)?;
        macs::add(conv2d_macs(self.shape(), w.shape(), spec));
        let (x, wt) = (self.value_arc(), w.value_arc());
        let has_bias = bias.is_some();
        let backward = move |g: &Tensor| {
            let (dx, dw, db) = conv2d_backward(&x, &wt, g, spec).expect("shapes validated in forward");
            let mut v = vec![Some(dx), Some(dw)];
            if has_bias {
                v.push(Some(db));
            }
            v
        };
        Ok(match bias {
            Some(b) => self.tape().record("conv2d", &[self, w, b], out, backward),
            None => self.tape().record("conv2d", &[self, w], out, backward),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Direct quadruple-loop oracle, independent of the row-sliced kernel.
    fn naive(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Tensor {
        let (n, c, h, wd) = x.dims4("t").unwrap();
        let (co, cig, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
        let ho = conv_out_dim(h, kh, spec.stride, spec.pad);
        let wo = conv_out_dim(wd, kw, spec.stride, spec.pad);
        let cog = co / spec.groups;
        let mut out = Tensor::zeros(vec![n, co, ho, wo]);
        for b in 0..n {
            for o in 0..co {
                let grp = o / cog;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci_l in 0..cig {
                            let ci = grp * cig + ci_l;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                                    let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * cig + ci_l) * kh + ky) * kw + kx]
                                        * x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_center_is_nine() {
        let x = Tensor::ones(vec![1, 1, 3, 3]);
        let w = Tensor::ones(vec![1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, Conv2dSpec::new(1, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn identity_kernel_passes_through() {
        let mut r = rng::stream(1, "conv");
        let x = Tensor::randn(vec![2, 3, 5, 4], 1.0, &mut r);
        let mut w = Tensor::zeros(vec![3, 1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 9 + 4] = 1.0;
        }
        let y = conv2d(&x, &w, None, Conv2dSpec::same(3, 3)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn grouped_equals_per_group_convs() {
        let mut r = rng::stream(2, "conv");
        let x = Tensor::randn(vec![1, 4, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(vec![4, 1, 3, 3], 1.0, &mut r);
        let y = conv2d(&x, &w, None, Conv2dSpec::same(3, 4)).unwrap();
        for c in 0..4 {
            let xc = Tensor::new(vec![1, 1, 5, 5], x.data()[c * 25..(c + 1) * 25].to_vec()).unwrap();
            let wc = Tensor::new(vec![1, 1, 3, 3], w.data()[c * 9..(c + 1) * 9].to_vec()).unwrap();
            let yc = naive(&xc, &wc, Conv2dSpec::same(3, 1));
            for i in 0..25 {
                assert!((y.data()[c * 25 + i] - yc.data()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_over_strides_and_groups() {
        let mut r = rng::stream(3, "conv");
        for &(c, co, k, s, p, g, h, wd) in &[
            (3, 6, 3, 2, 1, 1, 7, 6),
            (4, 4, 5, 1, 2, 4, 6, 6),
            (6, 4, 1, 1, 0, 2, 3, 5),
            (2, 2, 3, 2, 0, 1, 5, 8),
            (8, 8, 9, 1, 4, 8, 4, 3),
        ] {
            let x = Tensor::randn(vec![2, c, h, wd], 1.0, &mut r);
            let w = Tensor::randn(vec![co, c / g, k, k], 1.0, &mut r);
            let spec = Conv2dSpec::new(s, p, g);
            let y = conv2d(&x, &w, None, spec).unwrap();
            assert!(y.max_abs_diff(&naive(&x, &w, spec)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn output_size_formula() {
        let x = Tensor::zeros(vec![1, 3, 11, 10]);
        let w = Tensor::zeros(vec![5, 3, 3, 3]);
        let y = conv2d(&x, &w, None, Conv2dSpec::new(2, 1, 1)).unwrap();
        assert_eq!(y.shape(), &[1, 5, (11 + 2 - 3) / 2 + 1, (10 + 2 - 3) / 2 + 1]);
    }

    #[test]
    fn shape_errors_name_the_dimension() {
        let x = Tensor::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::zeros(vec![4, 3, 3, 3]);
        let e = conv2d(&x, &w, None, Conv2dSpec::new(1, 1, 2)).unwrap_err().to_string();
        assert!(e.contains("input channels"), "{e}");
        let w = Tensor::zeros(vec![4, 2, 3, 3]);
        let e = conv2d(&x, &w, None, Conv2dSpec::new(1, 1, 1)).unwrap_err().to_string();
        assert!(e.contains("weight input channels"), "{e}");
        let w = Tensor::zeros(vec![4, 3, 2, 2]);
        let e = conv2d(&x, &w, None, Conv2dSpec::new(1, 1, 1)).unwrap_err().to_string();
        assert!(e.contains("kernel size"), "{e}");
    }
}
