//! Binary parameter checkpoints.
//!
//! Layout: magic `BLAD`, version `u16`, tensor count `u32`, then per tensor
//! name length `u16`, UTF-8 name, dtype `u8` (0 f32, 1 f64), rank `u8`,
//! extents `u32` each and the row-major payload. Integers and payload are
//! little-endian.

use std::path::Path;

use bladapt_core::{DType, ParamSet, Scalar, Tensor};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"BLAD";
pub const VERSION: u16 = 1;

pub fn encode<S: Scalar>(params: &ParamSet<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.numel() * S::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| CliError::Validation(String::from("too many tensors")))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| CliError::Validation(format!("tensor name too long: {}", name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE.code());
        let rank = u8::try_from(t.rank()).map_err(|_| CliError::Validation(format!("rank too large: {}", name)))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| CliError::Validation(format!("extent too large: {}", name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CliError::format(self.path, format!("truncated while reading {} at byte {}", what, self.pos))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decode a checkpoint; stored values of either dtype are converted to `S`.
/// `path` only labels errors.
pub fn decode<S: Scalar>(bytes: &[u8], path: &Path) -> Result<ParamSet<S>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(CliError::format(path, "bad magic, not a checkpoint"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CliError::format(path, format!("unsupported version {}", version)));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| CliError::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or_else(|| CliError::format(path, format!("unknown dtype {}", code)))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CliError::format(path, "tensor too large"))?;
        let size = dtype.size();
        let payload = r.take(n.saturating_mul(size), "payload")?;
        let data: Vec<S> = payload
            .chunks_exact(size)
            .map(|c| match dtype {
                DType::F32 => S::lit(f32::read_le(c) as f64),
                DType::F64 => S::lit(f64::read_le(c)),
            })
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CliError::format(path, e.to_string()))?;
        if params.insert(&name, t).is_some() {
            return Err(CliError::format(path, format!("duplicate tensor {}", name)));
        }
    }
    if r.pos != bytes.len() {
        return Err(CliError::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save<S: Scalar>(path: &Path, params: &ParamSet<S>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, encode(params)?).map_err(|e| CliError::io(path, e))
}

pub fn load<S: Scalar>(path: &Path, what: &'static str, hint: &'static str) -> Result<ParamSet<S>> {
    if !path.exists() {
        return Err(CliError::Missing {
            what,
            path: path.to_path_buf(),
            hint,
        });
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes, path)
}
