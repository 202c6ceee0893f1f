//! Binary checkpoint format.
//!
//! ```text
//! magic "UUPCCKPT" | u32 version | u64 len + model config JSON
//! u64 seed | u64 epoch | u64 global_step | u64 seg_steps | u64 cls_steps
//! u64 count, then per parameter:
//!     u32 len + name | u64 adam step | raw tensor ×3 (value, m, v)
//! ```
//! All integers little-endian; tensors in the raw f64 tensor format.

use std::path::Path;

use indexmap::IndexMap;

use super::{Moments, TrainState};
use crate::data::{decode_raw_from, encode_raw_into, RawDtype};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UUPCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&state.model).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    for v in [state.seed, state.epoch, state.global_step, state.seg_steps, state.cls_steps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for (name, t) in state.params.iter() {
        let mo = &state.moments[name];
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&mo.step.to_le_bytes());
        for x in [t, &mo.m, &mo.v] {
            encode_raw_into(&mut out, x, RawDtype::F64);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() < n {
            return Err(format!("truncated checkpoint while reading {what}"));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> std::result::Result<usize, String> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| format!("truncated checkpoint: {what} length {n}"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<TrainState, String> {
    let mut r = Reader { bytes };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err("bad magic: not a checkpoint".into());
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        ));
    }
    let n = r.len("config")?;
    let model: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| format!("embedded config: {e}"))?;
    model.validate().map_err(|e| e.to_string())?;
    let seed = r.u64("seed")?;
    let epoch = r.u64("epoch")?;
    let global_step = r.u64("global_step")?;
    let seg_steps = r.u64("seg_steps")?;
    let cls_steps = r.u64("cls_steps")?;

    let count = r.u64("parameter count")?;
    let mut params = ModelParams::new();
    let mut moments = IndexMap::new();
    for _ in 0..count {
        let len = r.u32("name")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| "parameter name is not UTF-8".to_string())?
            .to_string();
        let step = r.u64("step")?;
        let mut tensors = Vec::with_capacity(3);
        for _ in 0..3 {
            tensors.push(decode_raw_from(&mut r.bytes).map_err(|e| format!("{name}: {e}"))?);
        }
        let v = tensors.pop().unwrap();
        let m = tensors.pop().unwrap();
        let t = tensors.pop().unwrap();
        if m.shape() != t.shape() || v.shape() != t.shape() {
            return Err(format!("{name}: moment shapes disagree with the parameter"));
        }
        params.insert(name.clone(), t);
        moments.insert(name, Moments { m, v, step });
    }
    if !r.bytes.is_empty() {
        return Err(format!("{} trailing bytes after checkpoint", r.bytes.len()));
    }
    params.check_against(&model).map_err(|e| e.to_string())?;
    Ok(TrainState {
        model,
        params,
        moments,
        global_step,
        seg_steps,
        cls_steps,
        epoch,
        seed,
    })
}

pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|d| Error::format(path, d))
}
