//! The DTF container: a minimal little-endian dense tensor file.
//!
//! ```text
//! "DTF1" | u32 version=1 | u32 rank | rank × u32 dims | u32 dtype | payload
//! ```
//!
//! Maps are stored as dtype 0 (f32). Dtype 1 (f64) exists for checkpoint
//! blocks, where parameters must survive bit-exactly. Task and range live in
//! a `key=value` sidecar at `<path>.meta`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::TensorError;
use crate::tensor::{DenseMap, Task, ValueRange};

pub const MAGIC: [u8; 4] = *b"DTF1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_code(code: u32) -> Result<Self, TensorError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(TensorError::BadDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A decoded tensor block of arbitrary rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

/// Serializes one tensor block (magic included). Fails on zero-sized dims.
pub fn encode_block(dims: &[usize], data: &[f64], dtype: Dtype) -> Result<Vec<u8>, TensorError> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(TensorError::EmptyTensor);
    }
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(TensorError::ShapeMismatch { expected: dims.to_vec(), got: vec![data.len()] });
    }
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + dtype.width() * numel);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(dtype as u32).to_le_bytes());
    match dtype {
        Dtype::F32 => data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(TensorError::Truncated { expected: end, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes one block from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_block(bytes: &[u8]) -> Result<(Block, usize), TensorError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(TensorError::BadVersion(version));
    }
    let rank = r.u32()?;
    if rank == 0 || rank > 8 {
        return Err(TensorError::BadRank(rank));
    }
    let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
    if dims.contains(&0) {
        return Err(TensorError::EmptyTensor);
    }
    let dtype = Dtype::from_code(r.u32()?)?;
    let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel.ok_or_else(|| TensorError::InvalidMeta("dimension product overflows".into()))?;
    let payload_len = numel
        .checked_mul(dtype.width())
        .ok_or_else(|| TensorError::InvalidMeta("payload size overflows".into()))?;
    let payload = r.take(payload_len)?;
    let data = match dtype {
        Dtype::F32 => payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect(),
        Dtype::F64 => payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
    };
    Ok((Block { dims, dtype, data }, r.pos))
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Ordered `key=value` sidecar contents.
pub type Meta = BTreeMap<String, String>;

pub fn parse_meta(text: &str) -> Result<Meta, TensorError> {
    let mut meta = Meta::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TensorError::InvalidMeta(format!("line without `=`: {line}")))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(meta)
}

pub fn render_meta(meta: &Meta) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn read_meta(path: &Path) -> Result<Meta, TensorError> {
    let mp = meta_path(path);
    if !mp.exists() {
        return Ok(Meta::new());
    }
    parse_meta(&fs::read_to_string(mp)?)
}

fn range_to_meta(range: ValueRange, meta: &mut Meta) {
    match range {
        ValueRange::Interval { lo, hi } => {
            meta.insert("range_lo".into(), format!("{lo}"));
            meta.insert("range_hi".into(), format!("{hi}"));
        }
        ValueRange::Meters => {
            meta.insert("range".into(), "meters".into());
        }
        ValueRange::UnitVector => {
            meta.insert("range".into(), "unit".into());
        }
        ValueRange::Unspecified => {}
    }
}

fn range_from_meta(meta: &Meta) -> Result<ValueRange, TensorError> {
    let parse = |k: &str| -> Result<Option<f64>, TensorError> {
        meta.get(k)
            .map(|v| v.parse::<f64>().map_err(|_| TensorError::InvalidMeta(format!("{k}={v}"))))
            .transpose()
    };
    match (parse("range_lo")?, parse("range_hi")?) {
        (Some(lo), Some(hi)) => return Ok(ValueRange::Interval { lo, hi }),
        (None, None) => {}
        _ => return Err(TensorError::InvalidMeta("range_lo and range_hi must appear together".into())),
    }
    Ok(match meta.get("range").map(String::as_str) {
        Some("meters") => ValueRange::Meters,
        Some("unit") => ValueRange::UnitVector,
        Some(other) => return Err(TensorError::InvalidMeta(format!("range={other}"))),
        None => ValueRange::Unspecified,
    })
}

/// Decodes a rank-3 map from DTF bytes plus optional sidecar metadata.
pub fn decode_map(bytes: &[u8], meta: &Meta) -> Result<DenseMap, TensorError> {
    let (block, used) = decode_block(bytes)?;
    if block.dims.len() != 3 {
        return Err(TensorError::BadRank(block.dims.len() as u32));
    }
    if used != bytes.len() {
        return Err(TensorError::InvalidMeta(format!("{} trailing bytes", bytes.len() - used)));
    }
    let task = meta.get("task").map(|t| t.parse()).transpose()?.unwrap_or(Task::Latent);
    let range = range_from_meta(meta)?;
    DenseMap::new(block.dims[0], block.dims[1], block.dims[2], block.data, task, range)
}

pub fn read_dtf(path: &Path) -> Result<DenseMap, TensorError> {
    let bytes = fs::read(path)?;
    decode_map(&bytes, &read_meta(path)?)
}

/// Writes a map and its sidecar. Extra sidecar keys are merged in.
pub fn write_dtf_with_meta(map: &DenseMap, path: &Path, extra: &Meta) -> Result<(), TensorError> {
    let bytes = encode_block(&map.shape(), map.data(), Dtype::F32)?;
    let mut meta = extra.clone();
    meta.insert("task".into(), map.task().as_str().into());
    range_to_meta(map.range(), &mut meta);
    fs::write(path, bytes)?;
    fs::write(meta_path(path), render_meta(&meta))?;
    Ok(())
}

pub fn write_dtf(map: &DenseMap, path: &Path) -> Result<(), TensorError> {
    write_dtf_with_meta(map, path, &Meta::new())
}
