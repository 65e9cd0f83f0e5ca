//! Binary checkpoints.
//!
//! Layout (little endian): `PDCK`, u32 version, u8 element size, u32 length
//! and bytes of the config JSON, u32 parameter count, then per parameter a
//! u32-prefixed name, u32 rank, u64 dims and the raw values.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::config::PdaNetConfig;
use crate::error::{Error, Result};
use crate::model::PdaNet;
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 4] = b"PDCK";
pub const VERSION: u32 = 1;

pub fn checkpoint_bytes<T: Scalar>(model: &PdaNet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE);
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let store = model.params();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        let value = store.value(id);
        out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in value.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint(format!(
                "unexpected end of data at byte {} (need {n} more)",
                self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<PdaNet<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 || r.take(4)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let dtype = r.take(1)?[0];
    if dtype != T::DTYPE {
        return Err(Error::CorruptCheckpoint(format!(
            "stored element size {dtype}, expected {}",
            T::DTYPE
        )));
    }
    let len = r.u32()? as usize;
    let config: PdaNetConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    let mut model = PdaNet::<T>::new(config).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let count = r.u32()? as usize;
    if count != model.params().len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{count} parameters stored, architecture has {}",
            model.params().len()
        )));
    }
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        if name != model.params().name(id) {
            return Err(Error::CorruptCheckpoint(format!(
                "expected parameter {}, found {name}",
                model.params().name(id)
            )));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        if shape != model.params().value(id).shape() {
            return Err(Error::CorruptCheckpoint(format!("{name}: stored shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let data = r.take(n * T::BYTES)?;
        let values = data.chunks_exact(T::BYTES).map(T::read_le).collect();
        *model.params_mut().value_mut(id) = ArrayD::from_shape_vec(IxDyn(&shape), values).expect("checked shape");
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &PdaNet<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<PdaNet<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
