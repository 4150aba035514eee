//! Verification tooling behind the `hrss` binary: finite-difference
//! gradient suites, scan timing and contribution-map emitters.

pub mod bench;
pub mod contrib;
pub mod gradcheck;

use std::str::FromStr;

use crate::autodiff::Var;
use crate::blocks::{cross_merge, cross_scan, BlockConfig, BlockVariant, DvssBlock, Ffn, MultiDw, Ss2d};
use crate::dcn::{DeformParams, K};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init, Initializer, LayerNorm, Linear};
use crate::net::{Bottleneck, ClsHead, Fuse, HrModule, ModelConfig, Stem, Transition};
use crate::rng;
use crate::sscan::{selective_scan, Discretization, ScanParams};
use crate::tensor::Tensor;

pub use gradcheck::{FdCheckReport, FdConfig};

/// Gradient suites selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    All,
    Core,
    Sscan,
    Dcn,
    Blocks,
    Net,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "all" => Suite::All,
            "core" => Suite::Core,
            "sscan" => Suite::Sscan,
            "dcn" => Suite::Dcn,
            "blocks" => Suite::Blocks,
            "net" => Suite::Net,
            _ => return Err(Error::invalid("gradcheck", format!("unknown module '{s}' (expected all, core, sscan, dcn, blocks or net)"))),
        })
    }
}

fn randn(shape: Vec<usize>, seed: u64, label: &str) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng::stream(seed, label))
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, seed: u64, label: &str) -> Tensor {
    Tensor::uniform(shape, lo, hi, &mut rng::stream(seed, label))
}

pub fn run_suite(suite: Suite, cfg: &FdConfig) -> Result<Vec<FdCheckReport>> {
    let mut out = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Core {
        out.extend(core_suite(cfg)?);
    }
    if all || suite == Suite::Sscan {
        out.extend(sscan_suite(cfg)?);
    }
    if all || suite == Suite::Dcn {
        out.extend(dcn_suite(cfg)?);
    }
    if all || suite == Suite::Blocks {
        out.extend(blocks_suite(cfg)?);
    }
    if all || suite == Suite::Net {
        out.extend(net_suite(cfg)?);
    }
    Ok(out)
}

pub fn core_suite(cfg: &FdConfig) -> Result<Vec<FdCheckReport>> {
    let s = cfg.seed;
    let init = Initializer::new(s, Init::Randomized);
    let mut out = Vec::new();
    let x = randn(vec![2, 4, 5, 6], s, "core.x");

    let mut conv = Conv2d::new(&init, "conv", 4, 6, 3, 2, 2, true);
    out.extend(gradcheck::check_module("conv2d", &mut conv, vec![("x", x.clone())], |m, v| m.forward(&v[0]), cfg)?);

    let mut ln = LayerNorm::channels(&init, "ln", 4);
    out.extend(gradcheck::check_module("layer_norm", &mut ln, vec![("x", x.clone())], |m, v| m.forward(&v[0]), cfg)?);

    let mut fc = Linear::new(&init, "linear", 6, 3, true);
    let seq = randn(vec![2, 5, 6], s, "core.seq");
    out.extend(gradcheck::check_module("linear", &mut fc, vec![("x", seq.clone())], |m, v| m.forward(&v[0]), cfg)?);

    out.extend(gradcheck::check_fn(
        "activations",
        vec![("x", seq)],
        |v| v[0].gelu().mul(&v[0].silu())?.add(&v[0].softplus()),
        cfg,
    )?);
    out.extend(gradcheck::check_fn(
        "reshape_ops",
        vec![("x", x.clone())],
        |v| {
            let p = v[0].permute(&[0, 2, 3, 1])?.permute(&[0, 3, 1, 2])?;
            let n = p.narrow(1, 1, 2)?;
            let c = Var::concat(&[n.clone(), p], 1)?;
            let pooled = c.global_avg_pool()?;
            c.narrow(3, 0, 1)?.reshape(&[2, 6, 5])?.sum().add(&pooled.sum())
        },
        cfg,
    )?);
    out.extend(gradcheck::check_fn(
        "cross_scan_merge",
        vec![("x", x)],
        |v| {
            let seqs = cross_scan(&v[0])?;
            cross_merge(&seqs.mul(&seqs)?, 5, 6)
        },
        cfg,
    )?);
    Ok(out)
}

pub fn sscan_suite(cfg: &FdConfig) -> Result<Vec<FdCheckReport>> {
    let s = cfg.seed;
    let (b, l, c, n) = (2, 7, 3, 4);
    let mut out = Vec::new();
    for disc in [Discretization::FirstOrder, Discretization::ExactZoh] {
        let op = match disc {
            Discretization::FirstOrder => "selective_scan",
            Discretization::ExactZoh => "selective_scan_zoh",
        };
        let inputs = vec![
            ("x", randn(vec![b, l, c], s, "scan.x")),
            ("delta", uniform(vec![b, l, c], 0.1, 1.0, s, "scan.delta")),
            ("a", uniform(vec![c, n], -2.0, -0.3, s, "scan.a")),
            ("B", randn(vec![b, l, n], s, "scan.b")),
            ("C", randn(vec![b, l, n], s, "scan.c")),
        ];
        out.extend(gradcheck::check_fn(op, inputs, |v| selective_scan(&v[0], &v[1], &v[2], &v[3], &v[4], disc), cfg)?);
    }

    let mut layer = ScanParams::init("s6", c, n, 2, s)?;
    layer.randomize(s);
    let x = randn(vec![b, l, c], s, "s6.x");
    out.extend(gradcheck::check_module("s6_layer", &mut layer, vec![("x", x)], |m, v| m.forward(&v[0]), cfg)?);

    // x = 0 held fixed: y ≡ 0 for every Δ̃, so its gradient must vanish exactly
    let mut bias_only = ScanParams::init("s6_bias", c, n, 2, s)?;
    bias_only.randomize(s);
    let zero = Tensor::zeros(vec![b, l, c]);
    out.extend(gradcheck::check_module_at(
        "s6_zero_input",
        &mut bias_only,
        Vec::new(),
        vec![zero],
        |m, v| m.forward(&v[0]),
        cfg,
    )?);
    Ok(out)
}

pub fn dcn_suite(cfg: &FdConfig) -> Result<Vec<FdCheckReport>> {
    let s = cfg.seed;
    let (nb, c, h, w, g) = (1, 8, 5, 4, 4);
    let mut out = Vec::new();
    // integer plus 0.3 keeps every sample away from the bilinear kinks
    let mut r = rng::stream(s, "dcn.off");
    let off = Tensor::from_fn(vec![nb, 2 * g * K, h, w], |_| {
        use rand::Rng;
        r.random_range(-2i32..=2) as f64 + 0.3
    });
    let inputs = vec![
        ("x", randn(vec![nb, c, h, w], s, "dcn.x")),
        ("offsets", off),
        ("modulation", randn(vec![nb, g * K, h, w], s, "dcn.m")),
    ];
    out.extend(gradcheck::check_fn("deform_aggregate", inputs, |v| v[0].deform_aggregate(&v[1], &v[2], g), cfg)?);

    let init = Initializer::new(s, Init::Randomized);
    let mut dp = DeformParams::new(&init, "dcn", c, g)?;
    let x = randn(vec![nb, c, h, w], s, "dcnp.x");
    out.extend(gradcheck::check_module("deform_params", &mut dp, vec![("x", x)], |m, v| m.forward(&v[0]), cfg)?);
    Ok(out)
}

fn small_block(v: BlockVariant) -> BlockConfig {
    let mut bc = BlockConfig::new(4).with_variant(v);
    bc.state_dim = 2;
    bc
}

pub fn blocks_suite(cfg: &FdConfig) -> Result<Vec<FdCheckReport>> {
    let s = cfg.seed;
    let init = Initializer::new(s, Init::Randomized);
    let x = randn(vec![1, 4, 3, 4], s, "blocks.x");
    let mut out = Vec::new();

    for v in [BlockVariant::Ss2d, BlockVariant::Dss2d] {
        let bc = small_block(v);
        let mut m = Ss2d::new(&init, v.name(), &bc)?;
        let op = format!("ss2d[{}]", v.name());
        out.extend(gradcheck::check_module(&op, &mut m, vec![("x", x.clone())], |m, v| m.forward(&v[0]), cfg)?);
    }

    let mut mdw = MultiDw::new(&init, "multidw", 8, 4)?;
    let x8 = randn(vec![1, 8, 4, 3], s, "blocks.x8");
    out.extend(gradcheck::check_module("multidw", &mut mdw, vec![("x", x8)], |m, v| m.forward(&v[0]), cfg)?);

    for v in [BlockVariant::Ss2d, BlockVariant::MultidwInFfn] {
        let mut ffn = Ffn::new(&init, "ffn", &small_block(v))?;
        let op = format!("ffn[{}]", v.name());
        out.extend(gradcheck::check_module(&op, &mut ffn, vec![("x", x.clone())], |m, v| m.forward(&v[0]), cfg)?);
    }

    for v in BlockVariant::ALL {
        let mut blk = DvssBlock::new(&init, "dvss", &small_block(v))?;
        let op = format!("dvss[{}]", v.name());
        out.extend(gradcheck::check_module(&op, &mut blk, vec![("x", x.clone())], |m, v| m.forward(&v[0]), cfg)?);
    }
    Ok(out)
}

/// A miniature configuration with the production topology.
pub fn slice_config() -> ModelConfig {
    let mut cfg = ModelConfig::small();
    cfg.channels = [4, 8, 12, 16];
    cfg.blocks = [1, 1, 1, 1];
    cfg.modules = [1, 1, 1, 1];
    cfg.sections.stem_channels = 4;
    cfg.sections.stage1_width = 4;
    cfg.sections.head_channels = [4, 4, 8, 8];
    cfg.sections.num_classes = 3;
    cfg.input = [32, 32];
    cfg
}

pub fn net_suite(cfg: &FdConfig) -> Result<Vec<FdCheckReport>> {
    let s = cfg.seed;
    let init = Initializer::new(s, Init::Randomized);
    let mc = slice_config();
    let mut out = Vec::new();

    let mut stem = Stem::new(&init, 3, 4);
    let img = randn(vec![1, 3, 32, 32], s, "net.img");
    out.extend(gradcheck::check_module("stem", &mut stem, vec![("x", img)], |m, v| m.forward(&v[0]), cfg)?);

    let mut bn = Bottleneck::new(&init, "bottleneck", 4, 4, 4);
    let x = randn(vec![1, 4, 4, 4], s, "net.x");
    out.extend(gradcheck::check_module("bottleneck", &mut bn, vec![("x", x)], |m, v| m.forward(&v[0]), cfg)?);

    let pyramid = |chs: &[usize], side: usize, label: &str| -> Vec<Tensor> {
        chs.iter()
            .enumerate()
            .map(|(i, &c)| randn(vec![1, c, side >> i, side >> i], s, &format!("{label}{i}")))
            .collect()
    };
    let names = ["x0", "x1", "x2", "x3"];

    let mut tr = Transition::new(&init, "transition", &[6, 8], &[4, 8, 12]);
    let ins: Vec<(&str, Tensor)> = names.iter().copied().zip(pyramid(&[6, 8], 8, "tr")).collect();
    out.extend(gradcheck::check_module("transition", &mut tr, ins, |m, v| sum_all(m.forward(v)?), cfg)?);

    for norm in [true, false] {
        let mut fuse = Fuse::new(&init, "fuse", &mc.channels[..3], norm);
        let ins: Vec<(&str, Tensor)> = names.iter().copied().zip(pyramid(&mc.channels[..3], 8, "fu")).collect();
        let op = if norm { "fuse" } else { "fuse_no_norm" };
        out.extend(gradcheck::check_module(op, &mut fuse, ins, |m, v| sum_all(m.forward(v)?), cfg)?);
    }

    let mut head = ClsHead::new(&init, &mc);
    let ins: Vec<(&str, Tensor)> = names.iter().copied().zip(pyramid(&mc.channels, 8, "hd")).collect();
    out.extend(gradcheck::check_module("cls_head", &mut head, ins, |m, v| m.forward(v), cfg)?);

    let mut module = HrModule::new(&init, "module", &mc, 2, 1)?;
    let ins: Vec<(&str, Tensor)> = names.iter().copied().zip(pyramid(&mc.channels[..2], 4, "md")).collect();
    out.extend(gradcheck::check_module("hr_module", &mut module, ins, |m, v| sum_all(m.forward(v)?), cfg)?);
    Ok(out)
}

/// Flattens and concatenates branch outputs so one probe covers all of them.
fn sum_all<'t>(xs: Vec<Var<'t>>) -> Result<Var<'t>> {
    let parts: Vec<Var<'t>> = xs.iter().map(|x| x.reshape(&[x.value().numel()])).collect::<Result<_>>()?;
    Var::concat(&parts, 0)
}
