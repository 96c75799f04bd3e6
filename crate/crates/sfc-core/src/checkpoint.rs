//! Model checkpoints: a config manifest followed by every parameter as a
//! named tensor blob, all in one file.
//!
//! Layout: magic "SFCK" | u8 version (1) | u32 manifest length | manifest
//! JSON (the model config) | u32 entry count | entries. Each entry is
//! u16 name length | name bytes | u32 blob length | tensor blob. All integers
//! little-endian; tensor blobs reuse the standalone tensor container, so the
//! element type is checked on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, SfcError};
use crate::model::{Model, ModelConfig};
use crate::nn::Params;
use crate::tensor::{sfct, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"SFCK";
const VERSION: u8 = 1;

fn bad(detail: impl Into<String>) -> SfcError {
    SfcError::Checkpoint(detail.into())
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&model.cfg)
        .map_err(|e| bad(format!("config manifest does not serialize: {e}")))?;
    let params = model.collect_params();
    let mut out = Vec::with_capacity(manifest.len() + 64);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        if p.name.len() > u16::MAX as usize {
            return Err(bad(format!("parameter name too long: `{}`", p.name)));
        }
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let blob = sfct::to_bytes(&p.value);
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return Err(bad(format!("truncated at byte {}", self.at)));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("len checked")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("len checked")))
    }
}

/// Rebuild the model from the embedded manifest, then overwrite every
/// parameter from the archive. The archive must name exactly the parameter
/// set the config produces.
pub fn from_bytes<T: Scalar>(b: &[u8]) -> Result<Model<T>> {
    let mut r = Reader { b, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing SFCK magic"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let manifest_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(manifest_len)?)
        .map_err(|e| bad(format!("bad config manifest: {e}")))?;
    let n_entries = r.u32()? as usize;
    let mut entries: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for _ in 0..n_entries {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("parameter name is not UTF-8"))?
            .to_string();
        let blob_len = r.u32()? as usize;
        let tensor = sfct::from_bytes(r.take(blob_len)?)?;
        if entries.insert(name.clone(), tensor).is_some() {
            return Err(bad(format!("duplicate parameter `{name}`")));
        }
    }
    if r.at != b.len() {
        return Err(bad(format!("{} trailing bytes", b.len() - r.at)));
    }

    let mut model = Model::<T>::build(cfg, 0)?;
    let mut err = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match entries.remove(&p.name) {
            Some(t) if t.shape() == p.value.shape() => {
                let grad = p.value.requires_grad;
                p.value = t;
                p.value.requires_grad = grad;
            }
            Some(t) => {
                err = Some(bad(format!(
                    "parameter `{}`: archive shape {:?} vs model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(bad(format!("archive is missing parameter `{}`", p.name))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = entries.keys().next() {
        return Err(bad(format!("archive has unknown parameter `{name}`")));
    }
    Ok(model)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    from_bytes(&fs::read(path)?)
}

/// Read only the embedded config.
pub fn read_manifest(path: &Path) -> Result<ModelConfig> {
    let b = fs::read(path)?;
    let mut r = Reader { b: &b, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("missing SFCK magic"));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let manifest_len = r.u32()? as usize;
    serde_json::from_slice(r.take(manifest_len)?).map_err(|e| bad(format!("bad config manifest: {e}")))
}
