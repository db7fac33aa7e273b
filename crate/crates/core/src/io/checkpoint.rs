use std::fs;
use std::path::Path;

use super::config::{model_config_from_text, model_config_to_text};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::net::ModelParams;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"EOIR";

/// Binary layout, all integers little-endian `u32`:
/// magic, version, config length, config text, tensor count, then per
/// tensor its name length, name, rank, dims and `f32` values.
pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    push(&mut out, CHECKPOINT_VERSION as usize);
    let text = model_config_to_text(params.config());
    push(&mut out, text.len());
    out.extend_from_slice(text.as_bytes());
    push(&mut out, params.names().len());
    for (name, t) in params.named() {
        push(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        push(&mut out, t.shape().len());
        for &d in t.shape() {
            push(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::parse("magic", "not an EOIR checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Unsupported {
            field: "version".into(),
            value: version.to_string(),
        });
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::parse("config", "not UTF-8"))?;
    let config = model_config_from_text(text).map_err(|e| Error::parse("config", e.to_string()))?;
    let count = r.u32()?;
    let mut named = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse("tensor name", "not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        if rank > 8 {
            return Err(Error::parse("rank", format!("{name}: rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::parse("dims", format!("{name}: size overflow")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::parse("dims", "size overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::parse("payload", format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelParams::from_named(&config, named).map_err(|e| Error::parse("tensors", e.to_string()))
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    decode_checkpoint(&fs::read(path)?)
}
