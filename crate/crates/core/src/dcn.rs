//! Deformable spatial aggregation with unnormalized modulation.
//!
//! For group `g`, point `k` and position `p0`:
//! `y_g(p0) = Σ_k m_gk(p0) · x_g(p0 + p_k + Δp_gk(p0))`, where `p_k` runs
//! over the 3×3 grid and `x_g` is sampled bilinearly with zero padding.
//!
//! Layouts: offsets are (N, 2·G·K, H, W) with channel `(g·K + k)·2` holding
//! Δx and `+1` holding Δy; modulation is (N, G·K, H, W).

use rayon::prelude::*;

use crate::autodiff::{Module, Param, Var};
use crate::error::{Error, Result};
use crate::layers::{he_std, Fill, Initializer};
use crate::macs;
use crate::ops::Conv2dSpec;
use crate::tensor::Tensor;

/// Sampling points of the 3×3 grid.
pub const K: usize = 9;

/// `p_k` as (dx, dy), row-major over dy then dx; `k = 4` is the centre.
pub fn grid_offset(k: usize) -> (f64, f64) {
    ((k % 3) as f64 - 1.0, (k / 3) as f64 - 1.0)
}

/// Bilinear sample of plane `(n, c)` at column `px`, row `py`. Corners outside
/// the map contribute zero.
pub fn bilinear_sample(x: &Tensor, px: f64, py: f64, n: usize, c: usize) -> f64 {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let plane = &x.data()[(n * s[1] + c) * h * w..][..h * w];
    sample_plane(plane, h, w, px, py)
}

#[derive(Clone, Copy)]
struct Corners {
    x0: i64,
    y0: i64,
    fx: f64,
    fy: f64,
}

impl Corners {
    fn at(px: f64, py: f64) -> Self {
        let (x0, y0) = (px.floor(), py.floor());
        Corners {
            x0: x0 as i64,
            y0: y0 as i64,
            fx: px - x0,
            fy: py - y0,
        }
    }

    /// (flat index, bilinear weight, ∂weight/∂px, ∂weight/∂py) of each in-bounds corner.
    fn each(self, h: usize, w: usize, mut f: impl FnMut(usize, f64, f64, f64)) {
        let Corners { x0, y0, fx, fy } = self;
        for (dy, wy, dwy) in [(0, 1.0 - fy, -1.0), (1, fy, 1.0)] {
            let yy = y0 + dy;
            if yy < 0 || yy >= h as i64 {
                continue;
            }
            for (dx, wx, dwx) in [(0, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                let xx = x0 + dx;
                if xx < 0 || xx >= w as i64 {
                    continue;
                }
                f(yy as usize * w + xx as usize, wy * wx, wy * dwx, dwy * wx);
            }
        }
    }
}

fn sample_plane(plane: &[f64], h: usize, w: usize, px: f64, py: f64) -> f64 {
    let mut acc = 0.0;
    Corners::at(px, py).each(h, w, |i, wt, _, _| acc += wt * plane[i]);
    acc
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
}

impl Geometry {
    fn check(x: &Tensor, offsets: &Tensor, modulation: &Tensor, groups: usize) -> Result<Self> {
        const OP: &str = "deform_aggregate";
        let (n, c, h, w) = x.dims4(OP)?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(OP, "channels", format!("C={c} not divisible by groups={groups}")));
        }
        if offsets.shape() != [n, 2 * groups * K, h, w] {
            return Err(Error::shape(OP, "offsets", format!("expected {:?}, got {:?}", [n, 2 * groups * K, h, w], offsets.shape())));
        }
        if modulation.shape() != [n, groups * K, h, w] {
            return Err(Error::shape(OP, "modulation", format!("expected {:?}, got {:?}", [n, groups * K, h, w], modulation.shape())));
        }
        if !offsets.all_finite() {
            return Err(Error::NonFinite { op: OP, what: "offsets".into() });
        }
        Ok(Geometry { n, c, h, w, groups })
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Sample position of point `k` for group `g` at output pixel `p` of batch `b`.
    fn position(&self, offsets: &Tensor, b: usize, g: usize, k: usize, p: usize) -> (f64, f64) {
        let hw = self.hw();
        let base = (b * 2 * self.groups * K + (g * K + k) * 2) * hw + p;
        let (gx, gy) = grid_offset(k);
        let (ox, oy) = (offsets.data()[base], offsets.data()[base + hw]);
        ((p % self.w) as f64 + gx + ox, (p / self.w) as f64 + gy + oy)
    }

    fn modulation(&self, m: &Tensor, b: usize, g: usize, k: usize, p: usize) -> f64 {
        m.data()[(b * self.groups * K + g * K + k) * self.hw() + p]
    }
}

/// Forward aggregation. `x` is (N, C, H, W).
pub fn deform_aggregate(x: &Tensor, offsets: &Tensor, modulation: &Tensor, groups: usize) -> Result<Tensor> {
    let geo = Geometry::check(x, offsets, modulation, groups)?;
    let (hw, cg) = (geo.hw(), geo.c / groups);
    let mut out = vec![0.0; x.numel()];
    out.par_chunks_mut(hw.max(1)).enumerate().for_each(|(plane_idx, o)| {
        let (b, ch) = (plane_idx / geo.c, plane_idx % geo.c);
        let g = ch / cg;
        let plane = &x.data()[plane_idx * hw..][..hw];
        for (p, out_v) in o.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..K {
                let (px, py) = geo.position(offsets, b, g, k, p);
                acc += geo.modulation(modulation, b, g, k, p) * sample_plane(plane, geo.h, geo.w, px, py);
            }
            *out_v = acc;
        }
    });
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Gradients with respect to `(x, offsets, modulation)`.
fn deform_backward(x: &Tensor, offsets: &Tensor, modulation: &Tensor, gy: &Tensor, groups: usize) -> (Tensor, Tensor, Tensor) {
    let geo = Geometry::check(x, offsets, modulation, groups).expect("validated in forward");
    let (hw, cg) = (geo.hw(), geo.c / groups);
    // one work item per (batch, group): its channel planes, offset planes and modulation planes
    let items: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..geo.n * groups)
        .into_par_iter()
        .map(|i| {
            let (b, g) = (i / groups, i % groups);
            let mut dx = vec![0.0; cg * hw];
            let mut doff = vec![0.0; 2 * K * hw];
            let mut dm = vec![0.0; K * hw];
            for k in 0..K {
                for p in 0..hw {
                    let (px, py) = geo.position(offsets, b, g, k, p);
                    let mv = geo.modulation(modulation, b, g, k, p);
                    let corners = Corners::at(px, py);
                    let (mut gm, mut gx, mut gyy) = (0.0, 0.0, 0.0);
                    for j in 0..cg {
                        let ch = g * cg + j;
                        let plane_idx = b * geo.c + ch;
                        let plane = &x.data()[plane_idx * hw..][..hw];
                        let go = gy.data()[plane_idx * hw + p];
                        let dxp = &mut dx[j * hw..][..hw];
                        corners.each(geo.h, geo.w, |q, wt, dwx, dwy| {
                            gm += go * wt * plane[q];
                            gx += go * mv * dwx * plane[q];
                            gyy += go * mv * dwy * plane[q];
                            dxp[q] += go * mv * wt;
                        });
                    }
                    dm[k * hw + p] = gm;
                    doff[2 * k * hw + p] = gx;
                    doff[(2 * k + 1) * hw + p] = gyy;
                }
            }
            (dx, doff, dm)
        })
        .collect();
    let mut dx = Vec::with_capacity(x.numel());
    let mut doff = Vec::with_capacity(offsets.numel());
    let mut dm = Vec::with_capacity(modulation.numel());
    for (a, o, m) in items {
        dx.extend(a);
        doff.extend(o);
        dm.extend(m);
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(offsets.shape().to_vec(), doff),
        Tensor::from_parts(modulation.shape().to_vec(), dm),
    )
}

/// MACs charged per aggregation: four bilinear taps plus one modulation product per point.
pub fn deform_macs(n: usize, c: usize, h: usize, w: usize) -> u64 {
    (n * c * h * w * 5 * K) as u64
}

impl<'t> Var<'t> {
    pub fn deform_aggregate(&self, offsets: &Var<'t>, modulation: &Var<'t>, groups: usize) -> Result<Var<'t>> {
        let out = deform_aggregate(self.value(), offsets.value(), modulation.value(), groups)?;
        let (n, c, h, w) = self.value().dims4("deform_aggregate")?;
        macs::add(deform_macs(n, c, h, w));
        let (x, o, m) = (self.value_arc(), offsets.value_arc(), modulation.value_arc());
        Ok(self.tape().record("deform_aggregate", &[self, offsets, modulation], out, move |g| {
            let (dx, doff, dm) = deform_backward(&x, &o, &m, g, groups);
            vec![Some(dx), Some(doff), Some(dm)]
        }))
    }
}

/// Deformable 3×3 aggregation with its offset/modulation predictor.
///
/// The predictor is a depthwise 3×3 conv followed by two pointwise
/// projections. With the projections zero and the modulation bias one the
/// layer starts as a per-group 3×3 box filter.
#[derive(Clone, Debug)]
pub struct DeformParams {
    pub groups: usize,
    /// (C, 1, 3, 3) depthwise predictor kernel and its bias.
    pub dw_weight: Param,
    pub dw_bias: Param,
    /// (2GK, C, 1, 1) and bias.
    pub w_off: Param,
    pub b_off: Param,
    /// (GK, C, 1, 1) and bias.
    pub w_mod: Param,
    pub b_mod: Param,
}

impl DeformParams {
    pub fn new(init: &Initializer, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("{name}: channels {channels} not divisible by {groups} groups")));
        }
        let gk = groups * K;
        Ok(DeformParams {
            groups,
            dw_weight: init.param(&format!("{name}.dw.weight"), vec![channels, 1, 3, 3], Fill::Normal(he_std(9))),
            dw_bias: init.param(&format!("{name}.dw.bias"), vec![channels], Fill::Zeros),
            w_off: init.param(&format!("{name}.offset.weight"), vec![2 * gk, channels, 1, 1], Fill::Zeros),
            b_off: init.param(&format!("{name}.offset.bias"), vec![2 * gk], Fill::Zeros),
            w_mod: init.param(&format!("{name}.modulation.weight"), vec![gk, channels, 1, 1], Fill::Zeros),
            b_mod: init.param(&format!("{name}.modulation.bias"), vec![gk], Fill::Const(1.0)),
        })
    }

    pub fn channels(&self) -> usize {
        self.dw_weight.value().dim(0)
    }

    /// Parameters of the two pointwise projections (offsets and modulation).
    pub fn projection_params(&self) -> usize {
        self.w_off.numel() + self.b_off.numel() + self.w_mod.numel() + self.b_mod.numel()
    }

    /// `(offsets (N, 2GK, H, W), modulation (N, GK, H, W))` predicted from `x`.
    pub fn predict_offsets<'t>(&self, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let tape = x.tape();
        let c = self.channels();
        let feat = x.conv2d(&tape.param(&self.dw_weight), Some(&tape.param(&self.dw_bias)), Conv2dSpec::same(3, c))?;
        let pw = Conv2dSpec::new(1, 0, 1);
        let off = feat.conv2d(&tape.param(&self.w_off), Some(&tape.param(&self.b_off)), pw)?;
        let m = feat.conv2d(&tape.param(&self.w_mod), Some(&tape.param(&self.b_mod)), pw)?;
        Ok((off, m))
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let (off, m) = self.predict_offsets(x)?;
        x.deform_aggregate(&off, &m, self.groups)
    }
}

impl Module for DeformParams {
    fn params(&self) -> Vec<&Param> {
        vec![&self.dw_weight, &self.dw_bias, &self.w_off, &self.b_off, &self.w_mod, &self.b_mod]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.dw_weight,
            &mut self.dw_bias,
            &mut self.w_off,
            &mut self.b_off,
            &mut self.w_mod,
            &mut self.b_mod,
        ]
    }
}
