//! Single-file model checkpoints.
//!
//! Layout: magic `RUNC`, u8 version (1), u32 length + UTF-8 config text
//! (`key = value` lines), u32 entry count, then per parameter a u32 length +
//! UTF-8 name followed by the parameter as a `RUNT` blob. All integers are
//! little-endian; entries follow the model's parameter order.

use std::fs;
use std::path::Path;

use crate::data::tensor_file;
use crate::error::{Error, Result};
use crate::model::{RainUNet, RainUNetConfig};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RUNC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: RainUNetConfig,
    pub entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &RainUNet<T>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            entries: model
                .params()
                .into_iter()
                .map(|p| (p.name().to_string(), p.value.clone()))
                .collect(),
        }
    }

    /// Rebuilds the model from the stored config.
    pub fn into_model(self) -> Result<RainUNet<T>> {
        let mut model = RainUNet::new(self.config.clone(), 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies the stored tensors into `model`, matching entries to parameters
    /// in order and by name. A shape mismatch names both shapes.
    pub fn load_into(self, model: &mut RainUNet<T>) -> Result<()> {
        let mut params = model.params_mut();
        for (p, (name, value)) in params.iter().zip(&self.entries) {
            if p.name() != name {
                return Err(Error::Format(format!(
                    "checkpoint entry `{name}` where `{}` was expected",
                    p.name()
                )));
            }
            if p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}`: config shape {:?}, checkpoint shape {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
        }
        if params.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, config expects {}",
                self.entries.len(),
                params.len()
            )));
        }
        for (p, (_, value)) in params.iter_mut().zip(self.entries) {
            p.value = value;
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

pub fn write_checkpoint<T: Scalar>(model: &RainUNet<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    put_str(&mut out, &model.config().to_text())?;
    let params = model.params();
    put_u32(&mut out, params.len())?;
    for p in params {
        put_str(&mut out, p.name())?;
        tensor_file::encode(&p.value, &mut out)?;
    }
    Ok(out)
}

/// Parses a checkpoint. Tensors stored in the other float precision are converted.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = c.take(1)?[0];
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config = RainUNetConfig::from_text(&c.string()?)?;
    let count = c.u32()?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = c.string()?;
        let (t, used) = tensor_file::decode_float(&bytes[c.pos..])?;
        c.pos += used;
        entries.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { config, entries })
}

pub fn save_checkpoint<T: Scalar>(model: &RainUNet<T>, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<RainUNet<T>> {
    read_checkpoint(&fs::read(path)?)?.into_model()
}
