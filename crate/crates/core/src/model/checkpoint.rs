//! Named-tensor container used for checkpoints and feature-map dumps.
//!
//! ```text
//! magic    b"MGITENS\0"
//! version  u32
//! meta     u32 length + UTF-8 JSON (config echo and kind)
//! count    u32
//! tensor * count:
//!   name   u32 length + UTF-8
//!   ndim   u32, dims u64 * ndim
//!   data   f32 * product(dims)
//! ```
//! All numbers little endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MGITENS\0";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

pub fn write_container(path: impl AsRef<Path>, c: &Container) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&c.meta).map_err(|e| Error::Format(e.to_string()))?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &c.tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!("tensor `{name}` shape {shape:?} vs {} values", data.len())));
        }
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Format(format!("{}: truncated at byte {pos}", path.display())));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(8)? != MAGIC {
        return Err(Error::Format(format!("{} is not a tensor container", path.display())));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let n = u32_at(take(4)?) as usize;
    let meta = serde_json::from_slice(take(n)?).map_err(|e| Error::Format(format!("meta: {e}")))?;
    let count = u32_at(take(4)?) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(n)?.to_vec()).map_err(|_| Error::Format("tensor name".into()))?;
        let ndim = u32_at(take(4)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
        }
        let len: usize = shape.iter().product();
        let data = take(len * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, shape, data));
    }
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes in container".into()));
    }
    Ok(Container { meta, tensors })
}
