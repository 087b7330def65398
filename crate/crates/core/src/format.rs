//! `.pnet` model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "PNET"
//! 4       4     format version (u32, currently 1)
//! 8       8     metadata length M (u64)
//! 16      M     JSON metadata: architecture, seed, freeze flags
//! 16+M    8     parameter count P (u64)
//! 24+M    8*P   parameters as IEEE-754 f64, in enumeration order
//! ```
//!
//! Trailing bytes and non-finite parameter values are rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"PNET";
pub const VERSION: u32 = 1;

fn format_err<T>(offset: usize, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, msg: msg.into() })
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(model)?;
    let theta = model.theta();
    let mut out = Vec::with_capacity(24 + meta.len() + 8 * theta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for v in theta {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.bytes.len().checked_sub(self.at) {
            Some(left) if left >= n => {
                let s = &self.bytes[self.at..self.at + n];
                self.at += n;
                Ok(s)
            }
            _ => format_err(self.at, format!("truncated {what}: need {n} bytes")),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return format_err(0, "bad magic, not a PNET file");
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return format_err(4, format!("unsupported format version {version}"));
    }
    let meta_len = r.u64("metadata length")?;
    let meta_at = r.at;
    let meta_len = usize::try_from(meta_len).or_else(|_| format_err(8, "metadata length overflows"))?;
    let meta = r.take(meta_len, "metadata")?;
    let mut model: Model = match serde_json::from_slice(meta) {
        Ok(m) => m,
        Err(e) => return format_err(meta_at + e.column().saturating_sub(1), format!("bad metadata: {e}")),
    };
    if let Err(e) = model.validate() {
        return format_err(meta_at, format!("invalid architecture: {e}"));
    }
    let count_at = r.at;
    let count = r.u64("parameter count")?;
    if count != model.num_params() as u64 {
        return format_err(
            count_at,
            format!("payload holds {count} parameters, architecture needs {}", model.num_params()),
        );
    }
    for p in model.params_mut() {
        for v in p.values.iter_mut() {
            let at = r.at;
            *v = f64::from_le_bytes(r.take(8, "parameter payload")?.try_into().expect("8 bytes"));
            if !v.is_finite() {
                return format_err(at, "non-finite parameter value");
            }
        }
    }
    if r.at != bytes.len() {
        return format_err(r.at, format!("{} trailing bytes", bytes.len() - r.at));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}
