//! `GSCK` checkpoint files.
//!
//! Layout: `"GSCK"`, `u32` version, length-prefixed spec JSON, length-prefixed
//! metadata JSON, `u32` parameter count, then per name-sorted parameter its
//! length-prefixed name, `u32` rank, `u32` dims and little-endian `f32` data.
//! Lengths are little-endian `u32`.

use super::NetworkSpec;
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::preprocess::{PreprocessConfig, ScalerParams};
use crate::tensor::ParamStore;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_f1: Option<f64>,
    /// Decision threshold on probabilities.
    pub threshold: f32,
    pub scaler: Option<ScalerParams>,
    pub preprocess: Option<PreprocessConfig>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub meta: CheckpointMeta,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.raw(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.string(&serde_json::to_string(&ck.spec)?);
    w.string(&serde_json::to_string(&ck.meta)?);
    w.u32(ck.params.len() as u32);
    for (_, p) in ck.params.iter() {
        w.string(&p.name);
        w.u32(p.dims.len() as u32);
        for &d in &p.dims {
            w.u32(d as u32);
        }
        w.f32s(p.value.data());
    }
    Ok(w.buf)
}

/// Decodes and checks the payload against the parameters the network declares.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut rd = Reader::new(bytes, "checkpoint");
    rd.magic(CHECKPOINT_MAGIC)?;
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(rd.fail(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let spec: NetworkSpec = serde_json::from_str(&rd.string()?)?;
    spec.validate()?;
    let meta: CheckpointMeta = serde_json::from_str(&rd.string()?)?;
    let decls = spec.param_decls();
    let declared: std::collections::HashMap<&str, &Vec<usize>> =
        decls.iter().map(|d| (d.name.as_str(), &d.dims)).collect();
    let count = rd.u32()? as usize;
    let mut payload = std::collections::HashMap::new();
    for _ in 0..count {
        let at = rd.offset();
        let name = rd.string()?;
        let rank = rd.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(rd.fail(format!("parameter `{name}` has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| rd.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let parse = |detail: String| Error::Parse {
            what: "checkpoint",
            offset: at,
            detail,
        };
        match declared.get(name.as_str()) {
            None => return Err(parse(format!("unexpected parameter `{name}`"))),
            Some(d) if **d != dims => {
                return Err(parse(format!("`{name}` has dims {dims:?}, spec declares {d:?}")))
            }
            _ => {}
        }
        let data = rd.f32s(dims.iter().product())?;
        if payload.insert(name.clone(), data).is_some() {
            return Err(parse(format!("parameter `{name}` appears twice")));
        }
    }
    rd.finish()?;
    // same insertion order as a freshly initialized store
    let mut params = ParamStore::new();
    for d in decls {
        let data = payload
            .remove(&d.name)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing parameter `{}`", d.name)))?;
        params.insert(d.name, d.dims, data, d.trainable)?;
    }
    Ok(Checkpoint { spec, params, meta })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path.as_ref())?)
}
