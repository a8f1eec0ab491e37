//! Binary named-tensor container.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! magic [4]u8 | version u32 | count u32 | record*
//! record = name_len u32 | name [name_len]u8 | rank u32 | dims [rank]u64 | payload [prod(dims)]f32
//! ```
//!
//! Feature files use the same records under a different magic and without
//! the count field; records run to end of file.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TSAL";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed record: {0}")]
    Malformed(String),
}

pub type NamedTensors = BTreeMap<String, Tensor<f32>>;

pub fn write_header(buf: &mut Vec<u8>, magic: &[u8; 4]) {
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
}

pub fn write_record(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Forward-only reader over an in-memory file.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn header(&mut self, magic: &[u8; 4]) -> Result<(), FormatError> {
        let found: [u8; 4] = self.take(4, "magic")?.try_into().unwrap();
        if &found != magic {
            return Err(FormatError::BadMagic {
                found,
                expected: *magic,
            });
        }
        match self.u32("version")? {
            FORMAT_VERSION => Ok(()),
            v => Err(FormatError::UnsupportedVersion(v)),
        }
    }

    pub fn record(&mut self) -> Result<(String, Tensor<f32>), FormatError> {
        let len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(len, "name")?)
            .map_err(|e| FormatError::Malformed(format!("name is not utf-8: {e}")))?
            .to_string();
        let rank = self.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(FormatError::Malformed(format!("{name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.u64("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| FormatError::Malformed(format!("{name}: dims {dims:?}")))?;
        let payload = self.take(n.checked_mul(4).ok_or(FormatError::Truncated("payload"))?, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
        Ok((name, t))
    }
}

pub fn encode_checkpoint(params: &NamedTensors) -> Vec<u8> {
    let mut buf = Vec::new();
    write_header(&mut buf, CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        write_record(&mut buf, name, t);
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NamedTensors, FormatError> {
    let mut r = Reader::new(bytes);
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32("count")?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = r.record()?;
        if out.insert(name.clone(), t).is_some() {
            return Err(FormatError::Malformed(format!("duplicate tensor {name}")));
        }
    }
    if !r.at_end() {
        return Err(FormatError::Malformed("trailing bytes after last record".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &NamedTensors) -> Result<(), FormatError> {
    std::fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NamedTensors, FormatError> {
    decode_checkpoint(&std::fs::read(path)?)
}
