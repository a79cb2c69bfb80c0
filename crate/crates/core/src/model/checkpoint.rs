//! Versioned binary container for generator parameters.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic[8] version header_len header_json[header_len] count
//! count × ( name_len name[name_len] dims[4] values[f32 LE; numel] )
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Generator, GeneratorConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"ODESRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: GeneratorConfig,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::config(format!("{v} does not fit a checkpoint field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize a generator; parameters are stored as 32-bit floats.
pub fn write_checkpoint<T: Scalar>(generator: &Generator<T>, out: &mut impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize)?;
    let header = serde_json::to_vec(&Header {
        config: generator.config().clone(),
    })?;
    put_u32(&mut buf, header.len())?;
    buf.extend_from_slice(&header);
    let names = generator.param_names();
    let params = generator.params();
    put_u32(&mut buf, params.len())?;
    for (name, p) in names.iter().zip(params) {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        for d in p.shape().0 {
            put_u32(&mut buf, d)?;
        }
        for &v in p.data() {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out.write_all(&buf)
        .map_err(|e| Error::State(format!("checkpoint write failed: {e}")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::config(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parse a generator from checkpoint bytes.
pub fn read_checkpoint<T: Scalar>(input: &mut impl Read) -> Result<Generator<T>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::State(format!("checkpoint read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::config("not a generator checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::config(format!("unsupported checkpoint version {version}")));
    }
    let header_len = cur.u32()?;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)?;
    let mut generator = Generator::zeroed(header.config)?;
    let expected = generator.param_names();
    let count = cur.u32()?;
    if count != expected.len() {
        return Err(Error::config(format!(
            "checkpoint holds {count} tensors, configuration needs {}",
            expected.len()
        )));
    }
    for (name, slot) in expected.iter().zip(generator.params_mut()) {
        let len = cur.u32()?;
        let found = std::str::from_utf8(cur.take(len)?).map_err(|_| Error::config("tensor name is not UTF-8"))?;
        if found != name {
            return Err(Error::config(format!("expected tensor {name}, found {found}")));
        }
        let shape = Shape([cur.u32()?, cur.u32()?, cur.u32()?, cur.u32()?]);
        if shape != slot.shape() {
            return Err(Error::config(format!(
                "tensor {name} has shape {shape}, configuration needs {}",
                slot.shape()
            )));
        }
        let raw = cur.take(4 * shape.numel())?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        *slot = Tensor::from_vec(shape, data)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::config(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cur.pos
        )));
    }
    Ok(generator)
}

pub fn save_checkpoint<T: Scalar>(generator: &Generator<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(generator, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Generator<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut bytes.as_slice()).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
