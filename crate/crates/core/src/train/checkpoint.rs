//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "QL4CKPT\0"
//! version  u32      FORMAT_VERSION
//! hash     u64      model spec hash
//! epoch    u64
//! rng      u64 seed, u64 stream, u128 word position
//! step     u64      optimizer step counter
//! count    u32      number of directory entries
//! entries  count × { u16 name length, name (utf-8), u8 kind, u8 ndim,
//!                    ndim × u64 dims, f32 scale, u64 offset, u64 length }
//! payload  concatenated entry payloads; offsets are relative to its start
//! crc32    u32 over every preceding byte
//! ```
//!
//! Entry kinds: 0 = f32 tensor (little-endian), 1 = packed 4-bit codes
//! (two per byte, low nibble first, `scale` multiplies the codes).
//! Names are namespaced: `param/…`, `opt/…`, `packed/…`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ParamStore;
use crate::numerics::{Rng, Tensor};
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 8] = b"QL4CKPT\0";
pub const FORMAT_VERSION: u32 = 1;

const KIND_F32: u8 = 0;
const KIND_PACKED4: u8 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn of(rng: &Rng) -> Self {
        Self {
            seed: rng.seed(),
            stream: rng.stream(),
            word_pos: rng.word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        Rng::restore(self.seed, self.stream, self.word_pos)
    }
}

/// A packed 4-bit tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedEntry {
    pub rows: usize,
    pub cols: usize,
    pub scale: f32,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub spec_hash: u64,
    pub epoch: u64,
    pub rng: RngState,
    /// Model parameters, learned clip bounds included.
    pub params: ParamStore<f32>,
    pub optimizer: OptimizerState<f32>,
    pub packed: BTreeMap<String, PackedEntry>,
}

struct DirEntry {
    name: String,
    kind: u8,
    dims: Vec<usize>,
    scale: f32,
    payload: Vec<u8>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let f32_entry = |name: String, t: &Tensor<f32>| DirEntry {
            name,
            kind: KIND_F32,
            dims: t.shape().to_vec(),
            scale: 1.0,
            payload: t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        for (k, t) in &self.params {
            entries.push(f32_entry(format!("param/{k}"), t));
        }
        for (k, t) in &self.optimizer.slots {
            entries.push(f32_entry(format!("opt/{k}"), t));
        }
        for (k, p) in &self.packed {
            entries.push(DirEntry {
                name: format!("packed/{k}"),
                kind: KIND_PACKED4,
                dims: vec![p.rows, p.cols],
                scale: p.scale,
                payload: p.bytes.clone(),
            });
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_hash.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.kind);
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.scale.to_le_bytes());
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(e.payload.len() as u64).to_le_bytes());
            offset += e.payload.len() as u64;
        }
        for e in &entries {
            out.extend_from_slice(&e.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint(
                "checksum mismatch (corrupt or truncated file)".into(),
            ));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        let mut ck = Checkpoint {
            spec_hash: r.u64()?,
            epoch: r.u64()?,
            rng: RngState {
                seed: r.u64()?,
                stream: r.u64()?,
                word_pos: r.u128()?,
            },
            ..Checkpoint::default()
        };
        ck.optimizer.step = r.u64()?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name not utf-8".into()))?;
            let kind = r.u8()?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let scale = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            dir.push((name, kind, dims, scale, offset, len));
        }
        let payload = &body[r.pos..];
        for (name, kind, dims, scale, offset, len) in dir {
            let data = offset
                .checked_add(len)
                .and_then(|end| payload.get(offset..end))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` outside payload")))?;
            match kind {
                KIND_F32 => {
                    if len != 4 * dims.iter().product::<usize>() {
                        return Err(Error::Checkpoint(format!(
                            "entry `{name}` length does not match shape"
                        )));
                    }
                    let values = data
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    let t = Tensor::new(&dims, values)
                        .map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
                    if let Some(k) = name.strip_prefix("param/") {
                        ck.params.insert(k.to_string(), t);
                    } else if let Some(k) = name.strip_prefix("opt/") {
                        ck.optimizer.slots.insert(k.to_string(), t);
                    } else {
                        return Err(Error::Checkpoint(format!("unknown section in `{name}`")));
                    }
                }
                KIND_PACKED4 => {
                    let k = name.strip_prefix("packed/").ok_or_else(|| {
                        Error::Checkpoint(format!("packed entry `{name}` outside packed section"))
                    })?;
                    if dims.len() != 2 || len != (dims[0] * dims[1]).div_ceil(2) {
                        return Err(Error::Checkpoint(format!(
                            "packed entry `{name}` has inconsistent size"
                        )));
                    }
                    ck.packed.insert(
                        k.to_string(),
                        PackedEntry {
                            rows: dims[0],
                            cols: dims[1],
                            scale,
                            bytes: data.to_vec(),
                        },
                    );
                }
                other => return Err(Error::Checkpoint(format!("unknown entry kind {other}"))),
            }
        }
        Ok(ck)
    }

    /// Write atomically (temporary file in the same directory, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Read and verify a checkpoint. With `expected_hash` set, a different
    /// spec hash is refused unless `allow_mismatch`.
    pub fn load(path: &Path, expected_hash: Option<u64>, allow_mismatch: bool) -> Result<Self> {
        let ck = Self::from_bytes(&fs::read(path)?)?;
        if let Some(h) = expected_hash {
            if h != ck.spec_hash && !allow_mismatch {
                return Err(Error::Checkpoint(format!(
                    "model spec hash {:016x} does not match checkpoint {:016x}",
                    h, ck.spec_hash
                )));
            }
        }
        Ok(ck)
    }
}

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Checkpoint("unexpected end of header".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
}
