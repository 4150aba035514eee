use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, BlockVariant};
use crate::error::{Error, Result};
use crate::sscan::Discretization;

/// Spatial reduction the input must divide: the lowest branch sits at 1/32.
pub const INPUT_MULTIPLE: usize = 32;

/// Topology and block hyperparameters of the multi-branch network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: String,
    /// Branch channels C_1..C_4.
    pub channels: [usize; 4],
    /// Blocks per module B_1..B_4 (B_1 counts first-stage bottlenecks).
    pub blocks: [usize; 4],
    /// Modules per stage M_1..M_4.
    pub modules: [usize; 4],
    /// SSM expansion ratio per branch.
    pub ssm_ratio: [usize; 4],
    /// MLP expansion ratio per branch.
    pub mlp_ratio: [usize; 4],
    /// Group count per branch, used by the deformable mixer and MultiDW.
    #[serde(default = "default_groups")]
    pub groups: [usize; 4],
    pub state_dim: usize,
    /// Δ projection rank; `None` uses `ceil(C_i / 16)` per branch.
    #[serde(default)]
    pub dt_rank: Option<usize>,
    #[serde(default = "default_block")]
    pub block: BlockVariant,
    #[serde(default)]
    pub discretization: Discretization,
    /// Nominal input (H, W).
    pub input: [usize; 2],
    #[serde(default)]
    pub sections: Sections,
}

/// Fixed-width parts around the multi-branch stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sections {
    pub stem_channels: usize,
    pub stage1_width: usize,
    pub bottleneck_expansion: usize,
    /// Bottleneck widths of the classification head, one per branch.
    pub head_channels: [usize; 4],
    pub num_classes: usize,
    /// Layer norms inside fusion paths.
    pub fuse_norm: bool,
}

impl Default for Sections {
    fn default() -> Self {
        Sections {
            stem_channels: 64,
            stage1_width: 64,
            bottleneck_expansion: 4,
            head_channels: [32, 64, 128, 256],
            num_classes: 1000,
            fuse_norm: true,
        }
    }
}

fn default_groups() -> [usize; 4] {
    [4; 4]
}

fn default_block() -> BlockVariant {
    BlockVariant::Dss2dMultidw
}

impl ModelConfig {
    /// Small variant. The presets use a single state per channel, which is
    /// what lands the census at the published size.
    pub fn small() -> Self {
        ModelConfig {
            variant: "S".into(),
            channels: [32, 64, 128, 256],
            blocks: [2, 2, 2, 2],
            modules: [1, 1, 4, 2],
            ssm_ratio: [2; 4],
            mlp_ratio: [2; 4],
            groups: default_groups(),
            state_dim: 1,
            dt_rank: None,
            block: default_block(),
            discretization: Discretization::FirstOrder,
            input: [256, 192],
            sections: Sections::default(),
        }
    }

    pub fn base() -> Self {
        ModelConfig {
            variant: "B".into(),
            channels: [80, 160, 320, 640],
            ..Self::small()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "S" | "s" => Ok(Self::small()),
            "B" | "b" => Ok(Self::base()),
            _ => Err(Error::Config(format!("unknown variant '{name}' (expected S or B)"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Block configuration of branch `i`.
    pub fn block_config(&self, i: usize) -> BlockConfig {
        BlockConfig {
            channels: self.channels[i],
            ssm_ratio: self.ssm_ratio[i],
            mlp_ratio: self.mlp_ratio[i],
            state_dim: self.state_dim,
            dt_rank: self.dt_rank,
            dcn_groups: self.groups[i],
            multidw_groups: self.groups[i],
            use_dcn: false,
            use_multidw: false,
            multidw_in_ffn: false,
            discretization: self.discretization,
        }
        .with_variant(self.block)
    }

    /// Channels leaving the first stage.
    pub fn stage1_channels(&self) -> usize {
        self.sections.stage1_width * self.sections.bottleneck_expansion
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sections;
        if s.stem_channels == 0 || s.stage1_width == 0 || s.bottleneck_expansion == 0 || s.num_classes == 0 {
            return Err(Error::Config("stem, first-stage and head sizes must be positive".into()));
        }
        if self.blocks.contains(&0) || self.modules.contains(&0) || s.head_channels.contains(&0) {
            return Err(Error::Config("every stage needs at least one module and one block".into()));
        }
        for i in 0..4 {
            self.block_config(i).validate()?;
        }
        check_input(self.input[0], self.input[1])
    }
}

/// Rejects spatial sizes that the four-level pyramid cannot divide.
pub fn check_input(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(INPUT_MULTIPLE) || !w.is_multiple_of(INPUT_MULTIPLE) {
        return Err(Error::Config(format!(
            "input height and width must be positive multiples of {INPUT_MULTIPLE}, got {h}x{w}"
        )));
    }
    Ok(())
}
