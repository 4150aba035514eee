//! Per-direction contribution maps of a query pixel, written as PGM images
//! and CSV columns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{scan_position, DIRECTIONS};
use crate::error::{Error, Result};
use crate::rng;
use crate::sscan::{contribution_map, default_rank, s6_parameterize, ScanParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Constant,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContribConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub state_dim: usize,
    pub seed: u64,
    pub input: InputKind,
    /// Single channel to report; the channel mean when absent.
    #[serde(default)]
    pub channel: Option<usize>,
}

impl ContribConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: ContribConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 || self.state_dim == 0 {
            return Err(Error::Config("height, width, channels and state_dim must be positive".into()));
        }
        if let Some(ch) = self.channel {
            if ch >= self.channels {
                return Err(Error::Config(format!("channel {ch} outside 0..{}", self.channels)));
            }
        }
        Ok(())
    }

    /// Image (C, H, W) the scans read.
    pub fn input_image(&self) -> Tensor {
        let shape = vec![self.channels, self.height, self.width];
        match self.input {
            InputKind::Constant => Tensor::ones(shape),
            InputKind::Random => Tensor::randn(shape, 1.0, &mut rng::stream(self.seed, "contrib.input")),
        }
    }
}

/// Contribution of every pixel to the query pixel, one (H, W) map per direction.
pub fn direction_maps(cfg: &ContribConfig, row: usize, col: usize) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    if row >= h || col >= w {
        return Err(Error::invalid("contrib-map", format!("query ({row}, {col}) outside {h}x{w}")));
    }
    let l = h * w;
    let img = cfg.input_image();
    let target = row * w + col;
    let mut maps = Vec::with_capacity(DIRECTIONS);
    for d in 0..DIRECTIONS {
        let params = ScanParams::init(&format!("contrib.scan{d}"), c, cfg.state_dim, default_rank(c), cfg.seed)?;
        let seq = Tensor::from_fn(vec![1, l, c], |i| img.data()[(i % c) * l + scan_position(d, i / c, h, w)]);
        let step = s6_parameterize(&seq, &params)?;
        let t = (0..l).find(|&t| scan_position(d, t, h, w) == target).expect("scan order is a bijection");
        let along = contribution_map(&step, t + 1, cfg.channel)?;
        let mut pixels = vec![0.0; l];
        for (m, v) in along.data().iter().enumerate() {
            pixels[scan_position(d, m, h, w)] = *v;
        }
        maps.push(Tensor::from_parts(vec![h, w], pixels));
    }
    Ok(maps)
}

/// Plain PGM (P2), scaled so the largest value maps to 255.
pub fn to_pgm(map: &Tensor) -> String {
    let (h, w) = (map.dim(0), map.dim(1));
    let peak = map.max_abs();
    let mut s = format!("P2\n{w} {h}\n255\n");
    for r in 0..h {
        let row: Vec<String> = (0..w)
            .map(|c| {
                let v = map.data()[r * w + c];
                let g = if peak > 0.0 { (v.abs() / peak * 255.0).round() } else { 0.0 };
                format!("{}", g as u8)
            })
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

/// `index,value` with the row-major pixel index.
pub fn to_csv(map: &Tensor) -> String {
    let mut s = String::from("index,value\n");
    for (i, v) in map.data().iter().enumerate() {
        let _ = writeln!(s, "{i},{v:.12e}");
    }
    s
}

/// Writes `<stem>_d{k}.pgm` and `<stem>_d{k}.csv` for each direction; returns the paths.
pub fn write_maps(maps: &[Tensor], stem: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (k, m) in maps.iter().enumerate() {
        for (ext, body) in [("pgm", to_pgm(m)), ("csv", to_csv(m))] {
            let mut name = stem.as_os_str().to_owned();
            name.push(format!("_d{k}.{ext}"));
            let p = PathBuf::from(name);
            std::fs::write(&p, body)?;
            paths.push(p);
        }
    }
    Ok(paths)
}
