//! Closed-form parameter and multiply-accumulate census.
//!
//! Written against the architecture description rather than the module
//! tree, so it doubles as an independent check on the built model and on
//! the MACs the ops report at run time.
//!
//! MAC conventions: convolution `N·Co·Ho·Wo·(Ci/g)·k²`, linear
//! `rows·in·out`, selective scan `2·B·L·C·N` per direction, deformable
//! aggregation `5·K` per output element. Norms, activations and data
//! movement count zero.

use crate::blocks::{multidw_kernel, BlockConfig, DIRECTIONS};
use crate::dcn::K;

use super::config::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Census {
    params: u64,
    macs: u64,
}

impl std::ops::AddAssign for Census {
    fn add_assign(&mut self, o: Census) {
        self.params += o.params;
        self.macs += o.macs;
    }
}

/// `k`×`k` convolution at output resolution `hw` (pixels).
fn conv(cin: usize, cout: usize, k: usize, groups: usize, bias: bool, hw: usize) -> Census {
    let w = cout * (cin / groups) * k * k;
    Census {
        params: (w + if bias { cout } else { 0 }) as u64,
        macs: (w * hw) as u64,
    }
}

fn norm(c: usize) -> Census {
    Census { params: 2 * c as u64, macs: 0 }
}

/// Bias-free conv followed by an optional norm.
fn unit(cin: usize, cout: usize, k: usize, with_norm: bool, hw: usize) -> Census {
    let mut c = conv(cin, cout, k, 1, false, hw);
    if with_norm {
        c += norm(cout);
    }
    c
}

fn bottleneck(cin: usize, width: usize, expansion: usize, hw: usize) -> Census {
    let cout = width * expansion;
    let mut c = unit(cin, width, 1, true, hw);
    c += unit(width, width, 3, true, hw);
    c += unit(width, cout, 1, true, hw);
    if cin != cout {
        c += unit(cin, cout, 1, true, hw);
    }
    c
}

fn multidw(channels: usize, groups: usize, hw: usize) -> Census {
    let cg = channels / groups;
    let mut c = Census::default();
    for g in 0..groups {
        c += conv(cg, cg, multidw_kernel(g), cg, true, hw);
    }
    c
}

fn scan_head(d: usize, n: usize, r: usize, l: usize) -> Census {
    Census {
        // a_log, Δ̃, W_B, W_C, low-rank Δ
        params: (d * n + d + 2 * d * n + 2 * d * r) as u64,
        // B and C projections, Δ projection, recurrence
        macs: (l * (2 * d * n + 2 * d * r) + 2 * l * d * n) as u64,
    }
}

fn block(bc: &BlockConfig, hw: usize) -> Census {
    let (c, d, hid) = (bc.channels, bc.inner(), bc.hidden());
    let mut t = norm(c);
    t += conv(c, 2 * d, 1, 1, true, hw);
    if bc.use_dcn {
        let gk = bc.dcn_groups * K;
        t += conv(d, d, 3, d, true, hw);
        t += conv(d, 2 * gk, 1, 1, true, hw);
        t += conv(d, gk, 1, 1, true, hw);
        t += Census {
            params: 0,
            macs: (d * hw * 5 * K) as u64,
        };
    } else {
        t += conv(d, d, 3, d, true, hw);
    }
    for _ in 0..DIRECTIONS {
        t += scan_head(d, bc.state_dim, bc.rank(), hw);
    }
    t += norm(d);
    t += conv(d, c, 1, 1, true, hw);
    if bc.use_multidw {
        t += multidw(c, bc.multidw_groups, hw);
    }
    t += norm(c);
    t += conv(c, hid, 1, 1, true, hw);
    if bc.multidw_in_ffn {
        t += multidw(hid, bc.multidw_groups, hw);
    }
    t += conv(hid, c, 1, 1, true, hw);
    t
}

fn fuse(chs: &[usize], res: &[usize], with_norm: bool) -> Census {
    let mut t = Census::default();
    let nb = chs.len();
    if nb == 1 {
        return t;
    }
    for i in 0..nb {
        for j in 0..nb {
            if j > i {
                t += unit(chs[j], chs[i], 1, with_norm, res[j]);
            } else if j < i {
                for k in 0..i - j {
                    let cout = if k + 1 == i - j { chs[i] } else { chs[j] };
                    t += unit(chs[j], cout, 3, with_norm, res[j + k + 1]);
                }
            }
        }
    }
    t
}

fn census(cfg: &ModelConfig, h: usize, w: usize) -> (Census, Census) {
    let s = &cfg.sections;
    let e = s.bottleneck_expansion;
    // pixels per branch: 1/4, 1/8, 1/16, 1/32
    let res: Vec<usize> = (0..4).map(|i| (h >> (i + 2)) * (w >> (i + 2))).collect();
    let mut bb = Census::default();
    bb += unit(3, s.stem_channels, 3, true, (h / 2) * (w / 2));
    bb += unit(s.stem_channels, s.stem_channels, 3, true, res[0]);
    let mut cin = s.stem_channels;
    for _ in 0..cfg.modules[0] * cfg.blocks[0] {
        bb += bottleneck(cin, s.stage1_width, e, res[0]);
        cin = s.stage1_width * e;
    }
    let mut prev = vec![cin];
    for st in 1..4 {
        let next = &cfg.channels[..=st];
        for (i, (&p, &n)) in prev.iter().zip(next).enumerate() {
            if p != n {
                bb += unit(p, n, 3, true, res[i]);
            }
        }
        bb += unit(*prev.last().expect("non-empty"), next[st], 3, true, res[st]);
        for _ in 0..cfg.modules[st] {
            for i in 0..=st {
                let bc = cfg.block_config(i);
                for _ in 0..cfg.blocks[st] {
                    bb += block(&bc, res[i]);
                }
            }
            bb += fuse(next, &res[..=st], s.fuse_norm);
        }
        prev = next.to_vec();
    }

    let mut head = Census::default();
    for i in 0..4 {
        head += bottleneck(cfg.channels[i], s.head_channels[i], e, res[i]);
    }
    for i in 0..3 {
        head += conv(s.head_channels[i] * e, s.head_channels[i + 1] * e, 3, 1, true, res[i + 1]);
        head += norm(s.head_channels[i + 1] * e);
    }
    let fin = s.head_channels[3] * e;
    head += Census {
        params: (fin * s.num_classes + s.num_classes) as u64,
        macs: (fin * s.num_classes) as u64,
    };
    (bb, head)
}

/// Parameters of the classification model (backbone and head).
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let (bb, head) = census(cfg, cfg.input[0], cfg.input[1]);
    bb.params + head.params
}

/// MACs of one classification forward at batch 1 and input `h`×`w`.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    let (bb, head) = census(cfg, h, w);
    bb.macs + head.macs
}
