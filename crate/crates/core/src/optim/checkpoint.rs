//! Checkpoint container. All integers and floats little-endian:
//!
//! ```text
//! "NCAM"                      magic
//! u32  version                currently 1
//! u32  config length          followed by that many bytes of key=value text
//! u64  parameter count        must equal the count implied by the config
//! f32  parameters             level-major: perception weights, perception
//!                             bias, fc1 weights, fc1 bias, fc2 weights,
//!                             fc2 bias, flow head weights and bias (if any)
//! u8   optimizer flag         0 = none, 1 = Adam state follows
//! u64  step count             \
//! f32  first moments           > only when the flag is 1
//! f32  second moments         /
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::AdamState;
use crate::engine::{ArchConfig, NcaLevelParams, NcaModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NCAM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: NcaModel<f32>,
    pub adam: Option<AdamState>,
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    let start = out.len();
    out.resize(start + 4 * values.len(), 0);
    LittleEndian::write_f32_into(values, &mut out[start..]);
}

pub fn encode_checkpoint(model: &NcaModel<f32>, adam: Option<&AdamState>) -> Vec<u8> {
    let config = model.config.to_kv_text();
    let params = model.to_flat();
    let mut out = Vec::with_capacity(32 + config.len() + 12 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    put_f32s(&mut out, &params);
    match adam {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.extend_from_slice(&s.t.to_le_bytes());
            put_f32s(&mut out, &s.m);
            put_f32s(&mut out, &s.v);
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
        let Some(end) = end else {
            return Err(Error::Truncated {
                needed: self.pos.saturating_add(n),
                found: self.bytes.len(),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let mut v = vec![0.0; n];
        LittleEndian::read_f32_into(bytes, &mut v);
        Ok(v)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Checkpoint(format!("config text: {e}")))?;
    let config = ArchConfig::from_kv_text(text)?;
    let count = r.u64()?;
    if count != config.param_count() as u64 {
        return Err(Error::Checkpoint(format!(
            "config implies {} parameters, file declares {count}",
            config.param_count()
        )));
    }
    let params = r.f32s(count as usize)?;
    let adam = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let m = r.f32s(count as usize)?;
            let v = r.f32s(count as usize)?;
            Some(AdamState { m, v, t })
        }
        flag => return Err(Error::Checkpoint(format!("bad optimizer flag {flag}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let levels = (0..config.levels)
        .map(|_| NcaLevelParams::zeros(&config))
        .collect::<Result<Vec<_>>>()?;
    let mut model = NcaModel { config, levels };
    model.set_flat(&params)?;
    Ok(Checkpoint { model, adam })
}

/// Writes the checkpoint and returns its size in bytes.
pub fn save_checkpoint(model: &NcaModel<f32>, adam: Option<&AdamState>, path: impl AsRef<Path>) -> Result<u64> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model, adam);
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
