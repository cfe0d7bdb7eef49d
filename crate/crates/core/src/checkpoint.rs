//! Model checkpoint files and parameter averaging.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic        b"IACK"
//! version      u32 (= 1)
//! config_len   u32, config bytes (EncoderConfig as JSON)
//! param_count  u32
//! param_count × {
//!     name_len u32, name bytes
//!     ndim u32, ndim × u32 dims
//!     prod(dims) × f64
//! }
//! ```
//!
//! Parameters appear in the canonical order documented on
//! [`crate::encoder`], so two checkpoints of the same config line up entry
//! by entry.

use crate::encoder::{EncoderConfig, EncoderError, Model};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IACK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("cannot average checkpoints: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let cfg = serde_json::to_vec(model.config()).map_err(|e| CheckpointError::Format(e.to_string()))?;
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(&cfg)?;
    let params = model.params();
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in params {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for d in t.shape() {
            w.write_u32::<LittleEndian>(*d as u32)?;
        }
        for v in t.values() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let fmt = |m: String| CheckpointError::Format(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(fmt(format!("bad magic bytes {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let config: EncoderConfig = serde_json::from_slice(&cfg).map_err(|e| fmt(e.to_string()))?;
    let mut model = Model::zeros(config)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(fmt(format!("expected {} parameters, found {count}", params.len())));
    }
    for (name, t) in params.iter_mut() {
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut got = vec![0u8; n];
        r.read_exact(&mut got)?;
        if got != name.as_bytes() {
            return Err(fmt(format!(
                "expected parameter {name}, found {}",
                String::from_utf8_lossy(&got)
            )));
        }
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u32::<LittleEndian>()? as usize);
        }
        if dims != t.shape() {
            return Err(fmt(format!("{name}: shape {dims:?}, expected {:?}", t.shape())));
        }
        r.read_f64_into::<LittleEndian>(t.values_mut())?;
    }
    Ok(model)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    read_checkpoint(io::BufReader::new(std::fs::File::open(path)?))
}

/// Element-wise arithmetic mean, summed in the given order.
pub fn average(models: &[Model]) -> Result<Model> {
    let first = models
        .first()
        .ok_or_else(|| CheckpointError::Mismatch("no checkpoints".into()))?;
    if models.iter().any(|m| m.config() != first.config()) {
        return Err(CheckpointError::Mismatch("configs differ".into()));
    }
    let mut out = first.clone();
    let k = models.len() as f64;
    for m in &models[1..] {
        for ((_, acc), (_, t)) in out.params_mut().into_iter().zip(m.params()) {
            acc.values_mut().iter_mut().zip(t.values()).for_each(|(a, b)| *a += b);
        }
    }
    for (_, t) in out.params_mut() {
        t.values_mut().iter_mut().for_each(|v| *v /= k);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            num_layers: 2,
            model_dim: 4,
            vocab_size_ext: 3,
            intermediate_layers: vec![1],
            hidden_dim: 5,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn roundtrip_bit_exact() {
        let m = Model::new(cfg(), 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        let back = read_checkpoint(&buf[..]).unwrap();
        let mut buf2 = Vec::new();
        write_checkpoint(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn average_of_identical_is_unchanged() {
        let m = Model::new(cfg(), 4).unwrap();
        let avg = average(&[m.clone(), m.clone()]).unwrap();
        let single = average(std::slice::from_ref(&m)).unwrap();
        for (((_, a), (_, b)), (_, c)) in avg.params().into_iter().zip(m.params()).zip(single.params()) {
            assert_eq!(a.values(), b.values());
            assert_eq!(c.values(), b.values());
        }
    }

    #[test]
    fn average_is_mean() {
        let a = Model::new(cfg(), 1).unwrap();
        let b = Model::new(cfg(), 2).unwrap();
        let avg = average(&[a.clone(), b.clone()]).unwrap();
        let (pa, pb, pm) = (a.params(), b.params(), avg.params());
        for i in 0..pa.len() {
            for j in 0..pa[i].1.len() {
                let expected = (pa[i].1.values()[j] + pb[i].1.values()[j]) / 2.0;
                assert_eq!(pm[i].1.values()[j], expected);
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let m = Model::new(cfg(), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &m).unwrap();
        buf[1] = 0;
        assert!(matches!(read_checkpoint(&buf[..]), Err(CheckpointError::Format(_))));
    }
}
