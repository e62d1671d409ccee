//! ELPW weight container encoding.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ELPW"  u32 version (= 1)  u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, rank × u32 extents,
//!             extent-product × f32 payload
//! metadata:   UTF-8 `key=value\n` lines up to end of data
//! ```
//!
//! Tensors are written in name order and metadata keys in sorted order, so
//! encoding is byte-deterministic. The metadata block runs to the end of the
//! input; any byte there that is not part of a well-formed line is rejected.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::convnet::{ArchitectureId, WeightContainer};
use crate::error::FormatError;
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"ELPW";
pub const VERSION: u32 = 1;

const KEY_ARCH: &str = "architecture";
const KEY_KEEP: &str = "keep_prob";

pub fn encode(container: &WeightContainer) -> Result<Vec<u8>, FormatError> {
    // Re-check invariants: a container can only be built valid, but this
    // keeps the writer honest if that ever changes.
    let container = WeightContainer::with_metadata(
        container.architecture().id(),
        container.tensors().clone(),
        container.keep_prob(),
        container.metadata().clone(),
    )?;
    let tensors = container.tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| oversize("tensor count"))?.to_le_bytes());
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| oversize(name))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&u32::try_from(e).map_err(|_| oversize(name))?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut meta = BTreeMap::new();
    meta.insert(KEY_ARCH.to_string(), container.architecture().id().as_str().to_string());
    meta.insert(KEY_KEEP.to_string(), container.keep_prob().to_string());
    for (k, v) in container.metadata() {
        meta.insert(k.clone(), v.clone());
    }
    for (k, v) in meta {
        out.extend_from_slice(k.as_bytes());
        out.push(b'=');
        out.extend_from_slice(v.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

fn oversize(what: &str) -> FormatError {
    FormatError::Oversize(what.to_string())
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'b [u8], FormatError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(FormatError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn rest(&self) -> &'b [u8] {
        &self.buf[self.pos..]
    }
}

pub fn decode(bytes: &[u8]) -> Result<WeightContainer, FormatError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| FormatError::BadMagic)? != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = core::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| FormatError::InvalidUtf8("tensor name"))?
            .to_string();
        let rank = r.u8("tensor rank")?;
        if rank as usize > MAX_RANK {
            return Err(FormatError::Rank(name, rank));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(r.u32("tensor extents")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or(FormatError::Truncated("tensor payload"))?;
        let payload = r.take(n, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinitePayload(name));
        }
        let t = Tensor::new(&shape, data).expect("extent product matches payload");
        if tensors.insert(name.clone(), t).is_some() {
            return Err(FormatError::DuplicateTensor(name));
        }
    }

    let text = core::str::from_utf8(r.rest()).map_err(|_| FormatError::InvalidUtf8("metadata"))?;
    let mut meta = BTreeMap::new();
    let mut rest = text;
    while !rest.is_empty() {
        let Some((line, tail)) = rest.split_once('\n') else {
            return Err(FormatError::BadMetadata(rest.to_string()));
        };
        rest = tail;
        match line.split_once('=') {
            Some((k, v)) if !k.is_empty() && !meta.contains_key(k) => {
                meta.insert(k.to_string(), v.to_string());
            }
            _ => return Err(FormatError::BadMetadata(line.to_string())),
        }
    }
    let arch = meta.remove(KEY_ARCH).ok_or(FormatError::MissingMetadata(KEY_ARCH))?;
    let id = ArchitectureId::parse(&arch).ok_or(FormatError::UnknownArchitecture(arch))?;
    let keep = meta.remove(KEY_KEEP).ok_or(FormatError::MissingMetadata(KEY_KEEP))?;
    let keep_prob: f32 = keep
        .parse()
        .map_err(|_| FormatError::BadMetadata(String::from(KEY_KEEP) + "=" + &keep))?;
    WeightContainer::with_metadata(id, tensors, keep_prob, meta)
}
