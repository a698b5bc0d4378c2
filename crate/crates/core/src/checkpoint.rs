//! Binary checkpoint format.
//!
//! ```text
//! "POVD" | version u32 | config: 6 x u32 | array count u32 |
//!   per array: name len u32, name utf-8, rank u32, dims rank x u32, data f32...
//! ```
//! All integers and reals are little-endian. Arrays appear in layout order
//! and must match the shapes implied by the config exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::CheckpointError;
use crate::policy::{PolicyConfig, PolicyParams};

pub const MAGIC: &[u8; 4] = b"POVD";
pub const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

pub fn to_bytes(params: &PolicyParams<f32>) -> Vec<u8> {
    let c = &params.config;
    let layout = params.layout();
    let mut out = Vec::with_capacity(64 + params.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.vocab_size, c.d_model, c.layers, c.heads, c.d_ff, c.max_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(layout.tensors.len() as u32).to_le_bytes());
    for spec in &layout.tensors {
        out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
        out.extend_from_slice(spec.name.as_bytes());
        out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
        for &d in &spec.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &params.data[spec.range()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<PolicyParams<f32>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let config = PolicyConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        layers: dims[2],
        heads: dims[3],
        d_ff: dims[4],
        max_len: dims[5],
    };
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    let mut params = PolicyParams::<f32>::init(config, 0).map_err(|e| corrupt(e.to_string()))?;
    let specs = params.layout().tensors.clone();
    let count = r.u32()? as usize;
    if count != specs.len() {
        return Err(corrupt(format!("{count} arrays, expected {}", specs.len())));
    }
    for spec in &specs {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| corrupt("array name is not utf-8"))?;
        if name != spec.name {
            return Err(corrupt(format!("array `{name}` where `{}` was expected", spec.name)));
        }
        let rank = r.u32()? as usize;
        if rank != spec.shape.len() {
            return Err(corrupt(format!("`{name}` has rank {rank}")));
        }
        for &want in &spec.shape {
            let got = r.u32()? as usize;
            if got != want {
                return Err(corrupt(format!("`{name}` has dimension {got}, expected {want}")));
            }
        }
        let raw = r.take(spec.len() * 4)?;
        for (dst, src) in params.data[spec.range()].iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
    }
    if r.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    if !params.is_finite() {
        return Err(corrupt("non-finite weights"));
    }
    Ok(params)
}

/// Writes via a temporary sibling and a rename so readers never see a
/// partial file.
pub fn save_checkpoint(params: &PolicyParams<f32>, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("povd.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams<f32>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
