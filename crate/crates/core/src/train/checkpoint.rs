//! Binary checkpoints: `MANC`, version, model config text, then every
//! parameter as (name, shape, trainable, little-endian `f32` values).

use std::path::Path;

use crate::config::{ModelConfig, RunConfig};
use crate::error::{Error, Result};
use crate::model::Manet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MANC";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn to_bytes<S: Scalar>(model: &Manet<S>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = RunConfig { model: model.cfg.clone(), train: Default::default() }.model_text();
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, model.store.len());
    for (_, p) in model.store.iter() {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.tensor.ndim());
        for &d in p.tensor.shape() {
            put_u32(&mut out, d);
        }
        out.push(p.trainable as u8);
        for &v in p.tensor.data() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

/// Parses a checkpoint, rebuilding the model from its embedded config.
pub fn from_bytes<S: Scalar>(buf: &[u8]) -> Result<Manet<S>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg: ModelConfig = RunConfig::parse_text(&r.string()?)?.model;
    let mut model = Manet::new(&cfg, 0)?;
    let count = r.u32()?;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!("{count} parameters stored, config declares {}", model.store.len())));
    }
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let trainable = r.take(1)?[0] != 0;
        let numel: usize = shape.iter().product();
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|b| S::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let id = model.store.id(&name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let p = model.store.get_mut(id);
        if p.tensor.shape() != shape.as_slice() || p.trainable != trainable {
            return Err(Error::Checkpoint(format!(
                "`{name}`: stored {shape:?} trainable={trainable}, model {:?} trainable={}",
                p.tensor.shape(),
                p.trainable
            )));
        }
        p.tensor = Tensor::new(shape, data)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &Manet<S>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<Manet<S>> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let m = Manet::<f32>::new(&ModelConfig::toy(), 3).unwrap();
        let bytes = to_bytes(&m);
        let back: Manet<f32> = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = to_bytes(&Manet::<f32>::new(&ModelConfig::toy(), 3).unwrap());
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
    }
}
