//! Multi-resolution network: stem, bottleneck first stage, parallel
//! branches of scan blocks with repeated cross-resolution fusion, and a
//! classification head.

mod config;
mod count;
mod weights;

use std::sync::Arc;

pub use config::{check_input, ModelConfig, Sections, INPUT_MULTIPLE};
pub use count::{count_flops, count_params};
pub use weights::{load_weights, save_weights};

use crate::autodiff::{Module, Param, Tape, Var};
use crate::blocks::DvssBlock;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Initializer, LayerNorm, Linear};
use crate::ops::shape::IndexMap;
use crate::tensor::Tensor;

/// Convolution, optional channel norm, optional GELU.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: Option<LayerNorm>,
    pub act: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new(init: &Initializer, name: &str, cin: usize, cout: usize, k: usize, stride: usize, norm: bool, act: bool) -> Self {
        ConvUnit {
            conv: Conv2d::new(init, &format!("{name}.conv"), cin, cout, k, stride, 1, false),
            norm: norm.then(|| LayerNorm::channels(init, &format!("{name}.norm"), cout)),
            act,
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let mut y = self.conv.forward(x)?;
        if let Some(n) = &self.norm {
            y = n.forward(&y)?;
        }
        Ok(if self.act { y.gelu() } else { y })
    }
}

impl Module for ConvUnit {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv.params();
        v.extend(self.norm.iter().flat_map(|n| n.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv.params_mut();
        v.extend(self.norm.iter_mut().flat_map(|n| n.params_mut()));
        v
    }
}

/// Two stride-2 3×3 convolutions, each followed by norm and GELU.
#[derive(Clone, Debug)]
pub struct Stem {
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
}

impl Stem {
    pub fn new(init: &Initializer, cin: usize, c: usize) -> Self {
        Stem {
            conv1: ConvUnit::new(init, "stem.1", cin, c, 3, 2, true, true),
            conv2: ConvUnit::new(init, "stem.2", c, c, 3, 2, true, true),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let (_, _, h, w) = x.value().dims4("stem")?;
        check_input(h, w).map_err(|e| Error::shape("stem", "spatial extent", e.to_string()))?;
        self.conv2.forward(&self.conv1.forward(x)?)
    }
}

impl Module for Stem {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.conv1.params();
        v.extend(self.conv2.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v
    }
}

/// Residual bottleneck: 1×1 reduce, 3×3, 1×1 expand, each normalized, GELU
/// between. The sum is returned without a trailing activation.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub reduce: ConvUnit,
    pub conv: ConvUnit,
    pub expand: ConvUnit,
    /// Projection of the input when its channel count differs from the output.
    pub shortcut: Option<ConvUnit>,
}

impl Bottleneck {
    pub fn new(init: &Initializer, name: &str, cin: usize, width: usize, expansion: usize) -> Self {
        let cout = width * expansion;
        Bottleneck {
            reduce: ConvUnit::new(init, &format!("{name}.reduce"), cin, width, 1, 1, true, true),
            conv: ConvUnit::new(init, &format!("{name}.conv"), width, width, 3, 1, true, true),
            expand: ConvUnit::new(init, &format!("{name}.expand"), width, cout, 1, 1, true, false),
            shortcut: (cin != cout).then(|| ConvUnit::new(init, &format!("{name}.shortcut"), cin, cout, 1, 1, true, false)),
        }
    }

    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let y = self.expand.forward(&self.conv.forward(&self.reduce.forward(x)?)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        y.add(&skip)
    }
}

impl Module for Bottleneck {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.reduce.params();
        v.extend(self.conv.params());
        v.extend(self.expand.params());
        v.extend(self.shortcut.iter().flat_map(|s| s.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.reduce.params_mut();
        v.extend(self.conv.params_mut());
        v.extend(self.expand.params_mut());
        v.extend(self.shortcut.iter_mut().flat_map(|s| s.params_mut()));
        v
    }
}

/// Moves stage-s branch features into stage s+1: channel-adjusting 3×3
/// convs where widths change, plus a stride-2 conv that spawns the new
/// lowest-resolution branch from the previous lowest one.
#[derive(Clone, Debug)]
pub struct Transition {
    pub adjust: Vec<Option<ConvUnit>>,
    pub spawn: ConvUnit,
}

impl Transition {
    pub fn new(init: &Initializer, name: &str, prev: &[usize], next: &[usize]) -> Self {
        debug_assert_eq!(prev.len() + 1, next.len());
        let adjust = prev
            .iter()
            .zip(next)
            .enumerate()
            .map(|(i, (&p, &n))| (p != n).then(|| ConvUnit::new(init, &format!("{name}.adjust{i}"), p, n, 3, 1, true, true)))
            .collect();
        let spawn = ConvUnit::new(init, &format!("{name}.spawn"), *prev.last().expect("non-empty"), *next.last().expect("non-empty"), 3, 2, true, true);
        Transition { adjust, spawn }
    }

    pub fn forward<'t>(&self, xs: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let mut out = xs
            .iter()
            .zip(&self.adjust)
            .map(|(x, a)| match a {
                Some(u) => u.forward(x),
                None => Ok(x.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(self.spawn.forward(xs.last().expect("non-empty"))?);
        Ok(out)
    }
}

impl Module for Transition {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.adjust.iter().flatten().flat_map(|u| u.params()).collect();
        v.extend(self.spawn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.adjust.iter_mut().flatten().flat_map(|u| u.params_mut()).collect();
        v.extend(self.spawn.params_mut());
        v
    }
}

/// Path from input branch `j` to output branch `i`.
#[derive(Clone, Debug)]
pub enum FusePath {
    Identity,
    /// 1×1 conv (+ norm) then nearest upsampling by `factor`.
    Up { unit: ConvUnit, factor: usize },
    /// Chain of stride-2 3×3 convs; all but the last apply GELU.
    Down(Vec<ConvUnit>),
}

impl FusePath {
    fn forward<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            FusePath::Identity => Ok(x.clone()),
            FusePath::Up { unit, factor } => {
                let y = unit.forward(x)?;
                y.gather(&Arc::new(IndexMap::upsample_nearest(y.shape(), *factor)?))
            }
            FusePath::Down(units) => units.iter().try_fold(x.clone(), |y, u| u.forward(&y)),
        }
    }

    fn units(&self) -> Vec<&ConvUnit> {
        match self {
            FusePath::Identity => Vec::new(),
            FusePath::Up { unit, .. } => vec![unit],
            FusePath::Down(us) => us.iter().collect(),
        }
    }

    fn units_mut(&mut self) -> Vec<&mut ConvUnit> {
        match self {
            FusePath::Identity => Vec::new(),
            FusePath::Up { unit, .. } => vec![unit],
            FusePath::Down(us) => us.iter_mut().collect(),
        }
    }
}

/// Cross-resolution exchange: output `i` is the sum over inputs `j` of the
/// resampled features, in ascending `j`.
#[derive(Clone, Debug)]
pub struct Fuse {
    /// `paths[i][j]`.
    pub paths: Vec<Vec<FusePath>>,
}

impl Fuse {
    pub fn new(init: &Initializer, name: &str, channels: &[usize], norm: bool) -> Self {
        let nb = channels.len();
        if nb == 1 {
            return Fuse { paths: vec![vec![FusePath::Identity]] };
        }
        let paths = (0..nb)
            .map(|i| {
                (0..nb)
                    .map(|j| {
                        let pname = format!("{name}.{i}.{j}");
                        if j == i {
                            FusePath::Identity
                        } else if j > i {
                            FusePath::Up {
                                unit: ConvUnit::new(init, &pname, channels[j], channels[i], 1, 1, norm, false),
                                factor: 1 << (j - i),
                            }
                        } else {
                            let steps = i - j;
                            FusePath::Down(
                                (0..steps)
                                    .map(|k| {
                                        let last = k + 1 == steps;
                                        let cout = if last { channels[i] } else { channels[j] };
                                        ConvUnit::new(init, &format!("{pname}.{k}"), channels[j], cout, 3, 2, norm, !last)
                                    })
                                    .collect(),
                            )
                        }
                    })
                    .collect()
            })
            .collect();
        Fuse { paths }
    }

    pub fn forward<'t>(&self, xs: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        if xs.len() != self.paths.len() {
            return Err(Error::shape("fuse", "branches", format!("expected {}, got {}", self.paths.len(), xs.len())));
        }
        self.paths
            .iter()
            .map(|row| {
                let mut acc: Option<Var<'t>> = None;
                for (path, x) in row.iter().zip(xs) {
                    let y = path.forward(x)?;
                    acc = Some(match acc {
                        Some(a) => a.add(&y)?,
                        None => y,
                    });
                }
                Ok(acc.expect("at least one branch"))
            })
            .collect()
    }
}

impl Module for Fuse {
    fn params(&self) -> Vec<&Param> {
        self.paths.iter().flatten().flat_map(|p| p.units()).flat_map(|u| u.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.paths.iter_mut().flatten().flat_map(|p| p.units_mut()).flat_map(|u| u.params_mut()).collect()
    }
}

/// One module of a multi-branch stage: a run of blocks per branch, then fusion.
#[derive(Clone, Debug)]
pub struct HrModule {
    pub branches: Vec<Vec<DvssBlock>>,
    pub fuse: Fuse,
}

impl HrModule {
    pub fn new(init: &Initializer, name: &str, cfg: &ModelConfig, nb: usize, blocks: usize) -> Result<Self> {
        let branches = (0..nb)
            .map(|i| {
                let bc = cfg.block_config(i);
                (0..blocks)
                    .map(|k| DvssBlock::new(init, &format!("{name}.branch{i}.block{k}"), &bc))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HrModule {
            branches,
            fuse: Fuse::new(init, &format!("{name}.fuse"), &cfg.channels[..nb], cfg.sections.fuse_norm),
        })
    }

    pub fn forward<'t>(&self, xs: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let ys = xs
            .iter()
            .zip(&self.branches)
            .map(|(x, blocks)| blocks.iter().try_fold(x.clone(), |y, b| b.forward(&y)))
            .collect::<Result<Vec<_>>>()?;
        self.fuse.forward(&ys)
    }
}

impl Module for HrModule {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.branches.iter().flatten().flat_map(|b| b.params()).collect();
        v.extend(self.fuse.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.branches.iter_mut().flatten().flat_map(|b| b.params_mut()).collect();
        v.extend(self.fuse.params_mut());
        v
    }
}

/// Incremental head: per-branch bottleneck, stride-2 downsample-and-add from
/// the highest resolution down, global average pool, linear classifier.
#[derive(Clone, Debug)]
pub struct ClsHead {
    pub incre: Vec<Bottleneck>,
    pub down: Vec<ConvUnit>,
    pub fc: Linear,
}

impl ClsHead {
    pub fn new(init: &Initializer, cfg: &ModelConfig) -> Self {
        let s = &cfg.sections;
        let e = s.bottleneck_expansion;
        let incre = (0..4)
            .map(|i| Bottleneck::new(init, &format!("head.incre{i}"), cfg.channels[i], s.head_channels[i], e))
            .collect();
        let down = (0..3)
            .map(|i| {
                let (cin, cout) = (s.head_channels[i] * e, s.head_channels[i + 1] * e);
                ConvUnit {
                    conv: Conv2d::new(init, &format!("head.down{i}.conv"), cin, cout, 3, 2, 1, true),
                    norm: Some(LayerNorm::channels(init, &format!("head.down{i}.norm"), cout)),
                    act: true,
                }
            })
            .collect();
        ClsHead {
            incre,
            down,
            fc: Linear::new(init, "head.fc", s.head_channels[3] * e, s.num_classes, true),
        }
    }

    pub fn forward<'t>(&self, xs: &[Var<'t>]) -> Result<Var<'t>> {
        let mut y = self.incre[0].forward(&xs[0])?;
        for i in 1..4 {
            y = self.incre[i].forward(&xs[i])?.add(&self.down[i - 1].forward(&y)?)?;
        }
        self.fc.forward(&y.global_avg_pool()?)
    }
}

impl Module for ClsHead {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.incre.iter().flat_map(|b| b.params()).collect();
        v.extend(self.down.iter().flat_map(|u| u.params()));
        v.extend(self.fc.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.incre.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.down.iter_mut().flat_map(|u| u.params_mut()));
        v.extend(self.fc.params_mut());
        v
    }
}

/// The full network.
#[derive(Clone, Debug)]
pub struct HrssNet {
    pub config: ModelConfig,
    pub stem: Stem,
    pub stage1: Vec<Bottleneck>,
    pub transitions: Vec<Transition>,
    /// Stages 2..4, each a list of modules.
    pub stages: Vec<Vec<HrModule>>,
    pub head: ClsHead,
}

impl HrssNet {
    pub fn new(cfg: &ModelConfig, init: &Initializer) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.sections;
        let mut stage1 = Vec::new();
        let mut cin = s.stem_channels;
        for m in 0..cfg.modules[0] {
            for b in 0..cfg.blocks[0] {
                stage1.push(Bottleneck::new(init, &format!("stage1.{m}.{b}"), cin, s.stage1_width, s.bottleneck_expansion));
                cin = cfg.stage1_channels();
            }
        }
        let mut transitions = Vec::new();
        let mut stages = Vec::new();
        let mut prev = vec![cfg.stage1_channels()];
        for st in 1..4 {
            let next = &cfg.channels[..=st];
            transitions.push(Transition::new(init, &format!("transition{st}"), &prev, next));
            let modules = (0..cfg.modules[st])
                .map(|m| HrModule::new(init, &format!("stage{}.{m}", st + 1), cfg, st + 1, cfg.blocks[st]))
                .collect::<Result<Vec<_>>>()?;
            stages.push(modules);
            prev = next.to_vec();
        }
        Ok(HrssNet {
            config: cfg.clone(),
            stem: Stem::new(init, 3, s.stem_channels),
            stage1,
            transitions,
            stages,
            head: ClsHead::new(init, cfg),
        })
    }

    /// Backbone forward: the four branch outputs, highest resolution first.
    pub fn forward<'t>(&self, x: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let (_, c, _, _) = x.value().dims4("forward")?;
        if c != 3 {
            return Err(Error::shape("forward", "input channels", format!("expected 3, got {c}")));
        }
        let mut y = self.stem.forward(x)?;
        for b in &self.stage1 {
            y = b.forward(&y)?;
        }
        let mut xs = vec![y];
        for (t, modules) in self.transitions.iter().zip(&self.stages) {
            xs = t.forward(&xs)?;
            for m in modules {
                xs = m.forward(&xs)?;
            }
        }
        Ok(xs)
    }

    pub fn classify<'t>(&self, branches: &[Var<'t>]) -> Result<Var<'t>> {
        if branches.len() != 4 {
            return Err(Error::shape("classify", "branches", format!("expected 4, got {}", branches.len())));
        }
        self.head.forward(branches)
    }

    /// Inference convenience: branch tensors and logits without recording.
    pub fn infer(&self, x: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let tape = Tape::inference();
        let branches = self.forward(&tape.constant(x.clone()))?;
        let logits = self.classify(&branches)?.into_tensor();
        Ok((branches.into_iter().map(Var::into_tensor).collect(), logits))
    }

    pub fn backbone_params(&self) -> usize {
        self.num_params() - self.head.num_params()
    }
}

impl Module for HrssNet {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        v.extend(self.stage1.iter().flat_map(|b| b.params()));
        for (t, modules) in self.transitions.iter().zip(&self.stages) {
            v.extend(t.params());
            v.extend(modules.iter().flat_map(|m| m.params()));
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        v.extend(self.stage1.iter_mut().flat_map(|b| b.params_mut()));
        for (t, modules) in self.transitions.iter_mut().zip(self.stages.iter_mut()) {
            v.extend(t.params_mut());
            v.extend(modules.iter_mut().flat_map(|m| m.params_mut()));
        }
        v.extend(self.head.params_mut());
        v
    }
}
