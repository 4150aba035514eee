//! Data-movement ops: index gathers, concatenation and spatial pooling.
//!
//! Permutes, slices, channel shuffles, directional token orderings and
//! nearest upsampling are all an [`IndexMap`]: each output element is the
//! sum of `fan_in` input elements. The backward rule is a scatter-add.

use std::sync::Arc;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMap {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    fan_in: usize,
    idx: Vec<u32>,
}

impl IndexMap {
    /// `idx[i * fan_in + j]` is the `j`-th input feeding output `i`.
    pub fn new(in_shape: Vec<usize>, out_shape: Vec<usize>, fan_in: usize, idx: Vec<usize>) -> Result<Self> {
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = out_shape.iter().product();
        if idx.len() != n_out * fan_in {
            return Err(Error::shape("IndexMap", "index count", format!("{} for {n_out}x{fan_in}", idx.len())));
        }
        if n_in > u32::MAX as usize {
            return Err(Error::invalid("IndexMap", "input too large for 32-bit indices"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n_in) {
            return Err(Error::shape("IndexMap", "index", format!("{bad} out of range for {n_in} inputs")));
        }
        Ok(IndexMap {
            in_shape,
            out_shape,
            fan_in,
            idx: idx.into_iter().map(|i| i as u32).collect(),
        })
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    /// Source index of output `i` (first input when `fan_in > 1`).
    pub fn source(&self, i: usize) -> usize {
        self.idx[i * self.fan_in] as usize
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.in_shape.as_slice() {
            return Err(Error::shape(
                "gather",
                "input",
                format!("map expects {:?}, got {:?}", self.in_shape, x.shape()),
            ));
        }
        let xd = x.data();
        let data = self
            .idx
            .chunks_exact(self.fan_in)
            .map(|srcs| {
                let mut s = 0.0;
                for &j in srcs {
                    s += xd[j as usize];
                }
                s
            })
            .collect();
        Ok(Tensor::from_parts(self.out_shape.clone(), data))
    }

    fn scatter(&self, g: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(self.in_shape.clone());
        let dd = dx.data_mut();
        for (srcs, &gv) in self.idx.chunks_exact(self.fan_in).zip(g.data()) {
            for &j in srcs {
                dd[j as usize] += gv;
            }
        }
        dx
    }

    /// Axis permutation: output axis `k` is input axis `axes[k]`.
    pub fn permute(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of rank {}", shape.len())));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(shape);
        let n: usize = shape.iter().product();
        let mut idx = Vec::with_capacity(n);
        let mut coord = vec![0usize; shape.len()];
        for _ in 0..n {
            idx.push(axes.iter().zip(&coord).map(|(&a, &c)| c * in_strides[a]).sum());
            increment(&mut coord, &out_shape);
        }
        Self::new(shape.to_vec(), out_shape, 1, idx)
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("axis {axis}"), format!("[{start}, {}) out of {:?}", start + len, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for k in start..start + len {
                let base = (o * shape[axis] + k) * inner;
                idx.extend(base..base + inner);
            }
        }
        Self::new(shape.to_vec(), out_shape, 1, idx)
    }

    /// Channel shuffle on NCHW: view channels as (groups, C/groups), transpose, flatten.
    pub fn channel_shuffle(shape: &[usize], groups: usize) -> Result<Self> {
        let perm = shuffle_permutation(shape[1], groups)?;
        Self::channel_permutation(shape, &perm)
    }

    /// Output channel `k` takes input channel `perm[k]`.
    pub fn channel_permutation(shape: &[usize], perm: &[usize]) -> Result<Self> {
        let (n, c) = (shape[0], shape[1]);
        if perm.len() != c {
            return Err(Error::shape("channel_permutation", "channels", format!("{} vs {c}", perm.len())));
        }
        let hw: usize = shape[2..].iter().product();
        let mut idx = Vec::with_capacity(n * c * hw);
        for b in 0..n {
            for &src in perm {
                let base = (b * c + src) * hw;
                idx.extend(base..base + hw);
            }
        }
        Self::new(shape.to_vec(), shape.to_vec(), 1, idx)
    }

    /// Nearest-neighbour upsampling of NCHW by an integer factor.
    pub fn upsample_nearest(shape: &[usize], factor: usize) -> Result<Self> {
        let (n, c, h, w) = match shape {
            &[a, b, c, d] => (a, b, c, d),
            _ => return Err(Error::shape("upsample", "rank", format!("{shape:?}"))),
        };
        let (ho, wo) = (h * factor, w * factor);
        let mut idx = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            for y in 0..ho {
                for x in 0..wo {
                    idx.push((p * h + y / factor) * w + x / factor);
                }
            }
        }
        Self::new(shape.to_vec(), vec![n, c, ho, wo], 1, idx)
    }
}

/// `perm[k]` is the source channel of output channel `k` under the
/// (groups, C/groups) → transpose → flatten shuffle.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::shape("channel_shuffle", "channels", format!("C={channels} not divisible by groups={groups}")));
    }
    let per = channels / groups;
    // output position k = j * groups + g holds input channel g * per + j
    Ok((0..channels).map(|k| (k % groups) * per + k / groups).collect())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn increment(coord: &mut [usize], shape: &[usize]) {
    for i in (0..shape.len()).rev() {
        coord[i] += 1;
        if coord[i] < shape[i] {
            return;
        }
        coord[i] = 0;
    }
}

impl<'t> Var<'t> {
    pub fn gather(&self, map: &Arc<IndexMap>) -> Result<Var<'t>> {
        let out = map.apply(self.value())?;
        let m = Arc::clone(map);
        Ok(self.tape().record("gather", &[self], out, move |g| vec![Some(m.scatter(g))]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        self.gather(&Arc::new(IndexMap::permute(self.shape(), axes)?))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        self.gather(&Arc::new(IndexMap::narrow(self.shape(), axis, start, len)?))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape.to_vec())?;
        let in_shape = self.shape().to_vec();
        Ok(self.tape().record("reshape", &[self], out, move |g| {
            vec![Some(g.reshape(in_shape.clone()).expect("same numel"))]
        }))
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::shape("concat", "axis", format!("{axis} for rank {rank}")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape()[i]) {
                return Err(Error::shape("concat", "non-concat axes", format!("{:?} vs {:?}", s, first.shape())));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.value().data()[o * l * inner..][..l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        let refs: Vec<&Var<'t>> = parts.iter().collect();
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(first.tape().record("concat", &refs, out, move |g| {
            let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&gd[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads
                .into_iter()
                .zip(&part_shapes)
                .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                .collect()
        }))
    }

    /// Mean over the spatial axes of NCHW, giving (N, C).
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let (n, c, h, w) = self.value().dims4("global_avg_pool")?;
        let hw = h * w;
        let data = self
            .value()
            .data()
            .chunks_exact(hw)
            .map(|p| pairwise_sum(p) / hw as f64)
            .collect();
        let out = Tensor::from_parts(vec![n, c], data);
        Ok(self.tape().record("global_avg_pool", &[self], out, move |g| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw)).collect();
            vec![Some(Tensor::from_parts(vec![n, c, h, w], data))]
        }))
    }
}
