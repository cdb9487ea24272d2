//! Binary checkpoints.
//!
//! Layout (little endian): `"E2PC"`, `u32` version, 8-byte config hash,
//! `u32` step, `u32` tensor count, then per tensor a `u32` name length, the
//! UTF-8 name and a DTF block holding `f64` values.

use std::fs;
use std::path::Path;

use crate::dtf::{decode_block, encode_block, Dtype};
use crate::error::NnError;

use super::net::{NetConfig, Param, VelocityNet};
use super::tape::Value;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"E2PC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_checkpoint(net: &VelocityNet, step: u32) -> Result<Vec<u8>, NnError> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&net.config().hash());
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&encode_block(&p.value.dims, &p.value.data, Dtype::F64)?);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Corrupt(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint for a network with configuration `expected`.
/// Tensor names and shapes are checked before the config hash, so a
/// different architecture reports `ShapeMismatch`.
pub fn decode_checkpoint(bytes: &[u8], expected: &NetConfig) -> Result<(VelocityNet, u32), NnError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(NnError::Corrupt("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::VersionMismatch(version));
    }
    let hash: [u8; 8] = r.take(8, "config hash")?.try_into().unwrap();
    let step = r.u32("step")?;
    let count = r.u32("tensor count")? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| NnError::Corrupt("tensor name is not UTF-8".into()))?;
        let (block, used) = decode_block(&r.bytes[r.at..]).map_err(|e| NnError::Corrupt(format!("tensor `{name}`: {e}")))?;
        r.at += used;
        params.push(Param { name: name.to_string(), value: Value::new(block.dims, block.data)? });
    }
    if r.at != bytes.len() {
        return Err(NnError::Corrupt(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let mut net = VelocityNet::new(expected.clone(), 0)?;
    if params.len() != net.params().len() {
        return Err(NnError::ShapeMismatch {
            name: "tensor table".into(),
            expected: vec![net.params().len()],
            found: vec![params.len()],
        });
    }
    net.set_params(params)?;
    let want = expected.hash();
    if hash != want {
        return Err(NnError::HashMismatch { expected: hex(&want), found: hex(&hash) });
    }
    Ok((net, step))
}

pub fn save_checkpoint(net: &VelocityNet, step: u32, path: &Path) -> Result<(), NnError> {
    fs::write(path, encode_checkpoint(net, step)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: &NetConfig) -> Result<(VelocityNet, u32), NnError> {
    decode_checkpoint(&fs::read(path)?, expected)
}
