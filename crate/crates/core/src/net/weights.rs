//! Weights file: parameter tensors concatenated in module order, plus a JSON
//! manifest `<path>.manifest.json` mapping each name to its byte offset.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Module;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn save_weights(model: &impl Module, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path)?);
    let mut manifest = BTreeMap::new();
    let mut offset = 0u64;
    for p in model.params() {
        if manifest.insert(p.name().to_string(), offset).is_some() {
            return Err(Error::Format(format!("duplicate parameter name '{}'", p.name())));
        }
        p.value().write_to(&mut out)?;
        offset += p.value().encoded_len() as u64;
    }
    out.flush()?;
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Loads every parameter of `model` by name; shapes must match.
pub fn load_weights(model: &mut impl Module, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest: BTreeMap<String, u64> = serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
    let mut file = BufReader::new(File::open(path)?);
    for p in model.params_mut() {
        let off = *manifest
            .get(p.name())
            .ok_or_else(|| Error::Format(format!("manifest has no entry for '{}'", p.name())))?;
        file.seek(SeekFrom::Start(off))?;
        let t = Tensor::read_from(&mut (&mut file).take(u64::MAX))?;
        if t.shape() != p.value().shape() {
            return Err(Error::Format(format!(
                "'{}' has shape {:?} in file, model expects {:?}",
                p.name(),
                t.shape(),
                p.value().shape()
            )));
        }
        p.set(t)?;
    }
    Ok(())
}
