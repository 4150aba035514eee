//! Composite blocks: four-direction 2D selective scan (with a depthwise or a
//! deformable local mixer), the multi-kernel depthwise block, the FFN and
//! their residual assembly.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Module, Param, Var};
use crate::dcn::DeformParams;
use crate::error::{Error, Result};
use crate::layers::{he_std, Conv2d, Fill, Init, Initializer, LayerNorm};
use crate::ops::shape::{shuffle_permutation, IndexMap};
use crate::sscan::{default_rank, Discretization, ScanParams};

/// Number of scan directions.
pub const DIRECTIONS: usize = 4;

/// Grid position (row-major index) visited at step `t` of direction `dir`.
///
/// 0: row-major, 1: row-major reversed, 2: column-major, 3: column-major reversed.
pub fn scan_position(dir: usize, t: usize, h: usize, w: usize) -> usize {
    let l = h * w;
    let col_major = |t: usize| (t % h) * w + t / h;
    match dir {
        0 => t,
        1 => l - 1 - t,
        2 => col_major(t),
        3 => col_major(l - 1 - t),
        _ => panic!("direction {dir} out of range"),
    }
}

/// (B, C, H, W) → (B, 4, C, H·W).
pub fn cross_scan_map(shape: &[usize]) -> Result<IndexMap> {
    let (b, c, h, w) = dims4(shape, "cross_scan")?;
    let l = h * w;
    let mut idx = Vec::with_capacity(b * DIRECTIONS * c * l);
    for bi in 0..b {
        for d in 0..DIRECTIONS {
            for ch in 0..c {
                let base = (bi * c + ch) * l;
                idx.extend((0..l).map(|t| base + scan_position(d, t, h, w)));
            }
        }
    }
    IndexMap::new(shape.to_vec(), vec![b, DIRECTIONS, c, l], 1, idx)
}

/// (B, 4, C, H·W) → (B, C, H, W): undo each ordering and sum directions 0..3.
pub fn cross_merge_map(b: usize, c: usize, h: usize, w: usize) -> Result<IndexMap> {
    let l = h * w;
    let mut inv = vec![vec![0usize; l]; DIRECTIONS];
    for (d, table) in inv.iter_mut().enumerate() {
        for t in 0..l {
            table[scan_position(d, t, h, w)] = t;
        }
    }
    let mut idx = Vec::with_capacity(b * c * l * DIRECTIONS);
    for bi in 0..b {
        for ch in 0..c {
            for p in 0..l {
                for (d, table) in inv.iter().enumerate() {
                    idx.push(((bi * DIRECTIONS + d) * c + ch) * l + table[p]);
                }
            }
        }
    }
    IndexMap::new(vec![b, DIRECTIONS, c, l], vec![b, c, h, w], DIRECTIONS, idx)
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::shape(op, "rank", format!("expected (B, C, H, W), got {shape:?}"))),
    }
}

pub fn cross_scan<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    x.gather(&Arc::new(cross_scan_map(x.shape())?))
}

pub fn cross_merge<'t>(y: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let s = y.shape();
    if s.len() != 4 || s[1] != DIRECTIONS || s[3] != h * w {
        return Err(Error::shape("cross_merge", "input", format!("expected (B, 4, C, {}), got {s:?}", h * w)));
    }
    y.gather(&Arc::new(cross_merge_map(s[0], s[2], h, w)?))
}

/// Hyperparameters of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub ssm_ratio: usize,
    pub mlp_ratio: usize,
    pub state_dim: usize,
    /// Low rank of the Δ projection; `None` picks `ceil(channels / 16)`.
    #[serde(default)]
    pub dt_rank: Option<usize>,
    pub dcn_groups: usize,
    pub multidw_groups: usize,
    pub use_dcn: bool,
    pub use_multidw: bool,
    pub multidw_in_ffn: bool,
    #[serde(default)]
    pub discretization: Discretization,
}

/// The four block wirings compared in the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockVariant {
    /// Plain VSS block: SS2D, FFN.
    Ss2d,
    /// DSS2D, FFN.
    Dss2d,
    /// DSS2D, FFN with MultiDW inside.
    MultidwInFfn,
    /// DSS2D, standalone MultiDW, FFN.
    #[serde(rename = "dss2d+multidw")]
    Dss2dMultidw,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 4] = [
        BlockVariant::Ss2d,
        BlockVariant::Dss2d,
        BlockVariant::MultidwInFfn,
        BlockVariant::Dss2dMultidw,
    ];

    /// `(use_dcn, use_multidw, multidw_in_ffn)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            BlockVariant::Ss2d => (false, false, false),
            BlockVariant::Dss2d => (true, false, false),
            BlockVariant::MultidwInFfn => (true, false, true),
            BlockVariant::Dss2dMultidw => (true, true, false),
        }
    }

    pub fn from_flags(flags: (bool, bool, bool)) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.flags() == flags)
    }

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::Ss2d => "ss2d",
            BlockVariant::Dss2d => "dss2d",
            BlockVariant::MultidwInFfn => "multidw-in-ffn",
            BlockVariant::Dss2dMultidw => "dss2d+multidw",
        }
    }
}

impl std::str::FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown block variant '{s}' (expected ss2d, dss2d, dss2d+multidw or multidw-in-ffn)")))
    }
}

impl BlockConfig {
    /// Full block (DSS2D + MultiDW + FFN) with four groups and 16 states.
    pub fn new(channels: usize) -> Self {
        BlockConfig {
            channels,
            ssm_ratio: 2,
            mlp_ratio: 2,
            state_dim: 16,
            dt_rank: None,
            dcn_groups: 4,
            multidw_groups: 4,
            use_dcn: true,
            use_multidw: true,
            multidw_in_ffn: false,
            discretization: Discretization::FirstOrder,
        }
    }

    pub fn with_variant(mut self, v: BlockVariant) -> Self {
        (self.use_dcn, self.use_multidw, self.multidw_in_ffn) = v.flags();
        self
    }

    pub fn variant(&self) -> Option<BlockVariant> {
        BlockVariant::from_flags((self.use_dcn, self.use_multidw, self.multidw_in_ffn))
    }

    pub fn inner(&self) -> usize {
        self.ssm_ratio * self.channels
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.channels
    }

    pub fn rank(&self) -> usize {
        self.dt_rank.unwrap_or_else(|| default_rank(self.channels))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.ssm_ratio == 0 || self.mlp_ratio == 0 || self.state_dim == 0 || self.rank() == 0 {
            return fail(format!("block sizes must be positive: {self:?}"));
        }
        if self.variant().is_none() {
            return fail(format!(
                "flags use_dcn={}, use_multidw={}, multidw_in_ffn={} match no block variant",
                self.use_dcn, self.use_multidw, self.multidw_in_ffn
            ));
        }
        let checks = [
            (self.channels, self.multidw_groups, "channels", "MultiDW groups", self.use_multidw),
            (self.inner(), self.dcn_groups, "SSM inner dim", "DCN groups", self.use_dcn),
            (self.hidden(), self.multidw_groups, "FFN hidden dim", "MultiDW groups", self.multidw_in_ffn),
        ];
        for (n, g, what, by, active) in checks {
            if active && (g == 0 || n % g != 0) {
                return fail(format!("{what} {n} is not divisible by {by} {g}"));
            }
        }
        Ok(())
    }
}

/// Local mixer inside the 2D scan block.
#[derive(Clone, Debug)]
pub enum LocalMixer {
    Depthwise(Conv2d),
    Deformable(DeformParams),
}

impl LocalMixer {
    fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            LocalMixer::Depthwise(c) => c.forward(x),
            LocalMixer::Deformable(d) => d.forward(x),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            LocalMixer::Depthwise(c) => c.params(),
            LocalMixer::Deformable(d) => d.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            LocalMixer::Depthwise(c) => c.params_mut(),
            LocalMixer::Deformable(d) => d.params_mut(),
        }
    }
}

/// Four-direction selective-scan block (SS2D, or DSS2D with the deformable mixer).
#[derive(Clone, Debug)]
pub struct Ss2d {
    pub in_proj: Conv2d,
    pub local: LocalMixer,
    pub scans: [ScanParams; DIRECTIONS],
    pub out_norm: LayerNorm,
    pub out_proj: Conv2d,
}

impl Ss2d {
    pub fn new(init: &Initializer, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let (c, d) = (cfg.channels, cfg.inner());
        let local = if cfg.use_dcn {
            LocalMixer::Deformable(DeformParams::new(init, &format!("{name}.dcn"), d, cfg.dcn_groups)?)
        } else {
            LocalMixer::Depthwise(Conv2d::new(init, &format!("{name}.dw"), d, d, 3, 1, d, true))
        };
        let scan = |k: usize| -> Result<ScanParams> {
            let mut p = ScanParams::init(&format!("{name}.scan{k}"), d, cfg.state_dim, cfg.rank(), init.seed)?;
            p.discretization = cfg.discretization;
            if init.mode == Init::Randomized {
                p.randomize(init.seed);
            }
            Ok(p)
        };
        Ok(Ss2d {
            in_proj: Conv2d::new(init, &format!("{name}.in_proj"), c, 2 * d, 1, 1, 1, true),
            local,
            scans: [scan(0)?, scan(1)?, scan(2)?, scan(3)?],
            out_norm: LayerNorm::channels(init, &format!("{name}.out_norm"), d),
            out_proj: Conv2d::new(init, &format!("{name}.out_proj"), d, c, 1, 1, 1, true),
        })
    }

    pub fn inner(&self) -> usize {
        self.out_norm.gamma.numel()
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let (b, _, h, w) = dims4(x.shape(), "ss2d")?;
        let d = self.inner();
        let l = h * w;
        let proj = self.in_proj.forward(x)?;
        let xi = proj.narrow(1, 0, d)?;
        let z = proj.narrow(1, d, d)?;
        let u = self.local.forward(&xi)?.silu();
        let xs = cross_scan(&u)?;
        let mut ys = Vec::with_capacity(DIRECTIONS);
        for (k, scan) in self.scans.iter().enumerate() {
            let seq = xs.narrow(1, k, 1)?.reshape(&[b, d, l])?.permute(&[0, 2, 1])?;
            let y = scan.forward(&seq)?;
            ys.push(y.permute(&[0, 2, 1])?.reshape(&[b, 1, d, l])?);
        }
        let merged = cross_merge(&Var::concat(&ys, 1)?, h, w)?;
        let gated = self.out_norm.forward(&merged)?.mul(&z.silu())?;
        self.out_proj.forward(&gated)
    }
}

impl Module for Ss2d {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.in_proj.params();
        v.extend(self.local.params());
        for s in &self.scans {
            v.extend(s.params());
        }
        v.extend(self.out_norm.params());
        v.extend(self.out_proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.in_proj.params_mut();
        v.extend(self.local.params_mut());
        for s in &mut self.scans {
            v.extend(s.params_mut());
        }
        v.extend(self.out_norm.params_mut());
        v.extend(self.out_proj.params_mut());
        v
    }
}

/// Kernel size of MultiDW group `g` (0-based): 3, 5, 7, 9, …
pub fn multidw_kernel(g: usize) -> usize {
    2 * (g + 1) + 1
}

/// Split channels into groups, depthwise conv with growing kernels, concat, shuffle, GELU.
#[derive(Clone, Debug)]
pub struct MultiDw {
    pub convs: Vec<Conv2d>,
    shuffle: Vec<usize>,
}

impl MultiDw {
    pub fn new(init: &Initializer, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!("MultiDW: channels {channels} not divisible by {groups} groups")));
        }
        let cg = channels / groups;
        let convs = (0..groups)
            .map(|g| {
                let k = multidw_kernel(g);
                Conv2d::with_fill(init, &format!("{name}.dw{g}"), cg, cg, k, 1, cg, true, Fill::Normal(he_std(k * k)))
            })
            .collect();
        Ok(MultiDw {
            convs,
            shuffle: shuffle_permutation(channels, groups)?,
        })
    }

    pub fn kernel_sizes(&self) -> Vec<usize> {
        self.convs.iter().map(Conv2d::kernel).collect()
    }

    pub fn channels(&self) -> usize {
        self.shuffle.len()
    }

    /// Sets every kernel to a centred delta with zero bias.
    pub fn set_identity(&mut self) {
        for c in &mut self.convs {
            let k = c.kernel();
            let cg = c.out_channels();
            let centre = (k / 2) * k + k / 2;
            c.weight.value_mut().data_mut().iter_mut().enumerate().for_each(|(i, v)| {
                *v = if i % (k * k) == centre { 1.0 } else { 0.0 };
            });
            if let Some(b) = &mut c.bias {
                *b.value_mut() = crate::tensor::Tensor::zeros(vec![cg]);
            }
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels() {
            return Err(Error::shape("multidw", "channels", format!("expected {} channels, got {:?}", self.channels(), x.shape())));
        }
        let cg = self.channels() / self.convs.len();
        let parts = self
            .convs
            .iter()
            .enumerate()
            .map(|(g, conv)| conv.forward(&x.narrow(1, g * cg, cg)?))
            .collect::<Result<Vec<_>>>()?;
        let cat = Var::concat(&parts, 1)?;
        let shuffled = cat.gather(&Arc::new(IndexMap::channel_permutation(cat.shape(), &self.shuffle)?))?;
        Ok(shuffled.gelu())
    }
}

impl Module for MultiDw {
    fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// LN → 1×1 expand → GELU → (MultiDW) → 1×1 project.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub norm: LayerNorm,
    pub fc1: Conv2d,
    pub multidw: Option<MultiDw>,
    pub fc2: Conv2d,
}

impl Ffn {
    pub fn new(init: &Initializer, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let (c, hid) = (cfg.channels, cfg.hidden());
        Ok(Ffn {
            norm: LayerNorm::channels(init, &format!("{name}.norm"), c),
            fc1: Conv2d::new(init, &format!("{name}.fc1"), c, hid, 1, 1, 1, true),
            multidw: if cfg.multidw_in_ffn {
                Some(MultiDw::new(init, &format!("{name}.multidw"), hid, cfg.multidw_groups)?)
            } else {
                None
            },
            fc2: Conv2d::new(init, &format!("{name}.fc2"), hid, c, 1, 1, 1, true),
        })
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let mut hdn = self.fc1.forward(&self.norm.forward(x)?)?.gelu();
        if let Some(m) = &self.multidw {
            hdn = m.forward(&hdn)?;
        }
        self.fc2.forward(&hdn)
    }
}

impl Module for Ffn {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm.params();
        v.extend(self.fc1.params());
        if let Some(m) = &self.multidw {
            v.extend(m.params());
        }
        v.extend(self.fc2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm.params_mut();
        v.extend(self.fc1.params_mut());
        if let Some(m) = &mut self.multidw {
            v.extend(m.params_mut());
        }
        v.extend(self.fc2.params_mut());
        v
    }
}

/// `x1 = x + SS2D(LN(x))`, `x2 = MultiDW(x1)` (when enabled, no residual),
/// `out = x2 + FFN(x2)`.
#[derive(Clone, Debug)]
pub struct DvssBlock {
    pub norm: LayerNorm,
    pub ss2d: Ss2d,
    pub multidw: Option<MultiDw>,
    pub ffn: Ffn,
}

impl DvssBlock {
    pub fn new(init: &Initializer, name: &str, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(DvssBlock {
            norm: LayerNorm::channels(init, &format!("{name}.norm"), cfg.channels),
            ss2d: Ss2d::new(init, &format!("{name}.ss2d"), cfg)?,
            multidw: if cfg.use_multidw {
                Some(MultiDw::new(init, &format!("{name}.multidw"), cfg.channels, cfg.multidw_groups)?)
            } else {
                None
            },
            ffn: Ffn::new(init, &format!("{name}.ffn"), cfg)?,
        })
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let x1 = x.add(&self.ss2d.forward(&self.norm.forward(x)?)?)?;
        let x2 = match &self.multidw {
            Some(m) => m.forward(&x1)?,
            None => x1,
        };
        x2.add(&self.ffn.forward(&x2)?)
    }
}

impl Module for DvssBlock {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.norm.params();
        v.extend(self.ss2d.params());
        if let Some(m) = &self.multidw {
            v.extend(m.params());
        }
        v.extend(self.ffn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.norm.params_mut();
        v.extend(self.ss2d.params_mut());
        if let Some(m) = &mut self.multidw {
            v.extend(m.params_mut());
        }
        v.extend(self.ffn.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::activation::gelu;
    use crate::autodiff::Tape;
    use crate::layers::Init;
    use crate::rng;
    use crate::sscan::{s6_parameterize, scan_naive};
    use crate::tensor::Tensor;

    fn rand(shape: Vec<usize>, seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut rng::stream(seed, "blocks-test"))
    }

    fn small_cfg(c: usize, v: BlockVariant) -> BlockConfig {
        BlockConfig {
            state_dim: 3,
            ..BlockConfig::new(c)
        }
        .with_variant(v)
    }

    fn eval<F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>>(f: F, x: &Tensor) -> Tensor {
        let tape = Tape::inference();
        f(&tape.constant(x.clone())).unwrap().into_tensor()
    }

    #[test]
    fn direction_tables_on_two_by_two() {
        // grid [[0, 1], [2, 3]]
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let xs = cross_scan_map(x.shape()).unwrap().apply(&x).unwrap();
        assert_eq!(xs.data(), &[0.0, 1.0, 2.0, 3.0, 3.0, 2.0, 1.0, 0.0, 0.0, 2.0, 1.0, 3.0, 3.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn merge_of_scan_is_four_times_identity() {
        let x = rand(vec![2, 3, 4, 5], 1);
        let xs = cross_scan_map(x.shape()).unwrap().apply(&x).unwrap();
        let back = cross_merge_map(2, 3, 4, 5).unwrap().apply(&xs).unwrap();
        assert_eq!(back, x.scale(4.0));
    }

    #[test]
    fn single_pixel_directions_coincide() {
        let x = rand(vec![1, 3, 1, 1], 2);
        let xs = cross_scan_map(x.shape()).unwrap().apply(&x).unwrap();
        for d in 1..4 {
            assert_eq!(xs.data()[d * 3..(d + 1) * 3], xs.data()[..3]);
        }
    }

    #[test]
    fn ss2d_preserves_shape_and_maps_zero_to_zero() {
        for v in [BlockVariant::Ss2d, BlockVariant::Dss2d] {
            let cfg = small_cfg(32, v);
            let blk = Ss2d::new(&Initializer::new(3, Init::Standard), "s", &cfg).unwrap();
            let y = eval(|x| blk.forward(x), &rand(vec![2, 32, 8, 6], 3));
            assert_eq!(y.shape(), &[2, 32, 8, 6]);
            let z = eval(|x| blk.forward(x), &Tensor::zeros(vec![1, 32, 3, 2]));
            assert!(z.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_pixel_is_four_times_one_direction() {
        let cfg = small_cfg(8, BlockVariant::Ss2d);
        let mut blk = Ss2d::new(&Initializer::new(4, Init::Standard), "s", &cfg).unwrap();
        let shared = blk.scans[0].clone();
        blk.scans = [shared.clone(), shared.clone(), shared.clone(), shared.clone()];
        let x = rand(vec![2, 8, 1, 1], 4);
        let got = eval(|v| blk.forward(v), &x);

        // single-direction oracle with the merge replaced by 4× the one scan
        let tape = Tape::inference();
        let d = blk.inner();
        let proj = blk.in_proj.forward(&tape.constant(x.clone())).unwrap();
        let xi = proj.narrow(1, 0, d).unwrap();
        let z = proj.narrow(1, d, d).unwrap().into_tensor();
        let LocalMixer::Depthwise(dw) = &blk.local else { unreachable!() };
        let u = dw.forward(&xi).unwrap().silu().into_tensor().reshape(vec![2, 1, d]).unwrap();
        let y = scan_naive(&s6_parameterize(&u, &shared).unwrap(), &u).unwrap().scale(4.0);
        let y = y.reshape(vec![2, d, 1, 1]).unwrap();
        let normed = crate::ops::norm::layer_norm(&y, blk.out_norm.gamma.value(), blk.out_norm.beta.value(), 1, blk.out_norm.eps).unwrap();
        let gated = normed.zip_map(&z.map(crate::ops::activation::silu), |a, b| a * b).unwrap();
        let want = crate::ops::conv::conv2d(&gated, blk.out_proj.weight.value(), blk.out_proj.bias.as_ref().map(|b| b.value()), blk.out_proj.spec).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn dss2d_matches_ss2d_with_box_kernel() {
        let init = Initializer::new(5, Init::Standard);
        let mut ss = Ss2d::new(&init, "s", &small_cfg(16, BlockVariant::Ss2d)).unwrap();
        let ds = Ss2d::new(&init, "s", &small_cfg(16, BlockVariant::Dss2d)).unwrap();
        let LocalMixer::Depthwise(dw) = &mut ss.local else { unreachable!() };
        *dw.weight.value_mut() = Tensor::ones(dw.weight.value().shape().to_vec());
        *dw.bias.as_mut().unwrap().value_mut() = Tensor::zeros(vec![32]);
        let x = rand(vec![2, 16, 5, 4], 5);
        let diff = eval(|v| ss.forward(v), &x).max_abs_diff(&eval(|v| ds.forward(v), &x)).unwrap();
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn multidw_kernels_and_identity_trace() {
        let mut m = MultiDw::new(&Initializer::new(6, Init::Standard), "m", 8, 4).unwrap();
        assert_eq!(m.kernel_sizes(), vec![3, 5, 7, 9]);
        m.set_identity();
        let x = rand(vec![1, 8, 5, 5], 6);
        let y = eval(|v| m.forward(v), &x);
        let order = [0, 2, 4, 6, 1, 3, 5, 7];
        for (k, &src) in order.iter().enumerate() {
            for p in 0..25 {
                assert_eq!(y.data()[k * 25 + p], gelu(x.data()[src * 25 + p]));
            }
        }
        assert!(MultiDw::new(&Initializer::new(6, Init::Standard), "m", 10, 4).is_err());
    }

    #[test]
    fn ffn_zero_projection_gives_zero_delta() {
        let cfg = small_cfg(8, BlockVariant::Dss2d);
        let mut f = Ffn::new(&Initializer::new(7, Init::Standard), "f", &cfg).unwrap();
        assert_eq!(f.fc1.out_channels(), 16);
        *f.fc2.weight.value_mut() = Tensor::zeros(vec![8, 16, 1, 1]);
        let y = eval(|v| f.forward(v), &rand(vec![1, 8, 3, 3], 7));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn block_at_inert_init_is_gelu_of_shuffle() {
        let cfg = small_cfg(8, BlockVariant::Dss2dMultidw);
        let mut blk = DvssBlock::new(&Initializer::new(8, Init::Standard), "b", &cfg).unwrap();
        *blk.ss2d.out_proj.weight.value_mut() = Tensor::zeros(vec![8, 16, 1, 1]);
        *blk.ffn.fc2.weight.value_mut() = Tensor::zeros(vec![8, 16, 1, 1]);
        blk.multidw.as_mut().unwrap().set_identity();
        let x = rand(vec![2, 8, 4, 3], 8);
        let y = eval(|v| blk.forward(v), &x);
        let order = [0, 2, 4, 6, 1, 3, 5, 7];
        for b in 0..2 {
            for (k, &src) in order.iter().enumerate() {
                for p in 0..12 {
                    assert_eq!(y.data()[(b * 8 + k) * 12 + p], gelu(x.data()[(b * 8 + src) * 12 + p]));
                }
            }
        }
    }

    #[test]
    fn vss_configuration_matches_explicit_vss_wiring() {
        let cfg = small_cfg(8, BlockVariant::Ss2d);
        let blk = DvssBlock::new(&Initializer::new(9, Init::Randomized), "b", &cfg).unwrap();
        assert!(blk.multidw.is_none() && blk.ffn.multidw.is_none());
        assert!(matches!(blk.ss2d.local, LocalMixer::Depthwise(_)));
        let x = rand(vec![1, 8, 4, 4], 9);
        let got = eval(|v| blk.forward(v), &x);
        let want = eval(
            |v| {
                let h = v.add(&blk.ss2d.forward(&blk.norm.forward(v)?)?)?;
                h.add(&blk.ffn.forward(&h)?)
            },
            &x,
        );
        assert_eq!(got, want);
        assert_eq!(got.shape(), &[1, 8, 4, 4]);
    }

    #[test]
    fn rejects_unlisted_flag_combinations() {
        let mut cfg = BlockConfig::new(8);
        cfg.use_dcn = false;
        cfg.use_multidw = true;
        assert!(cfg.validate().is_err());
        cfg.use_dcn = true;
        cfg.multidw_in_ffn = true;
        assert!(cfg.validate().is_err());
        let bad = BlockConfig::new(6);
        assert!(bad.validate().is_err());
        assert_eq!("dss2d+multidw".parse::<BlockVariant>().unwrap(), BlockVariant::Dss2dMultidw);
    }
}
