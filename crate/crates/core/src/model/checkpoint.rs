//! Checkpoint container: `RATK`, u32 version, u64 manifest length, a UTF-8
//! manifest (`key = value` config lines followed by one
//! `tensor = <name> <d0>,<d1>,..` line per parameter), then one tensor
//! record per parameter in manifest order.

use std::io::Read;
use std::path::Path;

use super::{RatConfig, RatModel};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Real;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RATK";
const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_model<T: Real>(model: &RatModel<T>) -> Vec<u8> {
    let mut kv = model.config().to_kv();
    for (name, t) in model.store().iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        kv.push("tensor", format!("{name} {}", dims.join(",")));
    }
    let manifest = kv.to_text();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for (_, t) in model.store().iter() {
        write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    }
    out
}

pub fn save_model<T: Real>(path: &Path, model: &RatModel<T>) -> Result<()> {
    std::fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

fn read_header(r: &mut &[u8]) -> Result<KvConfig> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    if &head[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}",
            &head[..4]
        )));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
    if len > r.len() {
        return Err(Error::Format("truncated checkpoint manifest".into()));
    }
    let (text, rest) = r.split_at(len);
    *r = rest;
    let text = std::str::from_utf8(text)
        .map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
    KvConfig::parse(text).map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))
}

/// Decodes a checkpoint into a model built from `cfg`, or from the stored
/// configuration when `cfg` is `None`. The stored tensor list must match the
/// model's parameters name for name and shape for shape; the first mismatch
/// is reported by name.
pub fn decode_model<T: Real>(bytes: &[u8], cfg: Option<&RatConfig>) -> Result<RatModel<T>> {
    let mut r = bytes;
    let kv = read_header(&mut r)?;
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => {
            RatConfig::from_kv(&kv).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?
        }
    };
    let mut model = RatModel::<T>::new(&cfg, 0)?;
    let stored: Vec<&str> = kv.get_all("tensor").collect();
    let ids: Vec<_> = model.store().ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        let name = model.store().name(id).to_string();
        let expected = model.store().get(id).shape().to_vec();
        let Some(entry) = stored.get(k) else {
            return Err(Error::Format(format!(
                "tensor `{name}` missing from checkpoint"
            )));
        };
        let (sname, sdims) = entry.split_once(' ').unwrap_or((entry, ""));
        let sshape: Vec<usize> = sdims
            .split(',')
            .filter(|d| !d.is_empty())
            .map(|d| d.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::Format(format!("bad tensor entry `{entry}`")))?;
        if sname != name || sshape != expected {
            return Err(Error::Format(format!(
                "tensor `{name}` {expected:?} does not match checkpoint entry `{sname}` {sshape:?}"
            )));
        }
        let t = read_tensor::<T, _>(&mut r)
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        if t.shape() != expected.as_slice() {
            return Err(Error::Format(format!(
                "tensor `{name}` record has shape {:?}, expected {expected:?}",
                t.shape()
            )));
        }
        *model.store_mut().get_mut(id) = t;
    }
    if stored.len() != ids.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} tensors, model has {}",
            stored.len(),
            ids.len()
        )));
    }
    if !r.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes in checkpoint",
            r.len()
        )));
    }
    Ok(model)
}

pub fn load_model<T: Real>(path: &Path) -> Result<RatModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, None).map_err(|e| annotate(path, e))
}

/// Loads weights into a model built from `cfg`. Settings that do not affect
/// parameter shapes (attention kind, lambda, scale mode) come from `cfg`.
pub fn load_model_as<T: Real>(path: &Path, cfg: &RatConfig) -> Result<RatModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes, Some(cfg)).map_err(|e| annotate(path, e))
}

fn annotate(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}
