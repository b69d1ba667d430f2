//! Versioned checkpoint container: header, embedded model config, then
//! every named parameter tensor in fixed order as 32-bit little-endian
//! values. Round trips are byte-exact.

use std::path::Path;

use crate::error::{HgrnError, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"HGRN";
const VERSION: u32 = 1;

/// Serializes config + parameters. Values are stored as f32 regardless of
/// the in-memory scalar width.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    cfg: &ModelConfig,
    params: &ModelParams<T>,
) -> Result<()> {
    let cfg_json = serde_json::to_vec(cfg)
        .map_err(|e| HgrnError::Checkpoint(format!("config serialization failed: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);
    let named = params.named();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(HgrnError::Checkpoint(format!(
                "{}: truncated at offset {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint back; the embedded config is returned alongside the
/// parameters and checked for structural consistency with them.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, ModelParams<T>)> {
    let buf = std::fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(HgrnError::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(HgrnError::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| HgrnError::Checkpoint(format!("{}: bad config: {e}", path.display())))?;
    cfg.validate()?;
    let count = r.u32()? as usize;
    // read tensors by name, then assemble through the fixed named order
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| HgrnError::Checkpoint(format!("{}: bad name", path.display())))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            data.push(T::from_f64(v as f64));
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(HgrnError::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            buf.len() - r.pos
        )));
    }
    let mut params = crate::model::init_params::<T>(&cfg, 0)?;
    let named = params.named();
    if named.len() != tensors.len() {
        return Err(HgrnError::Checkpoint(format!(
            "{}: {} tensors stored but config implies {}",
            path.display(),
            tensors.len(),
            named.len()
        )));
    }
    for (slot_idx, (expect_name, expect)) in named.iter().enumerate() {
        let (got_name, got) = &tensors[slot_idx];
        if got_name != expect_name {
            return Err(HgrnError::Checkpoint(format!(
                "{}: tensor {slot_idx} named {got_name:?}, expected {expect_name:?}",
                path.display()
            )));
        }
        if got.shape() != expect.shape() {
            return Err(HgrnError::Checkpoint(format!(
                "{}: {got_name} has shape {:?}, config implies {:?}",
                path.display(),
                got.shape(),
                expect.shape()
            )));
        }
    }
    for ((_, slot), (_, t)) in params.named_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn cfg() -> ModelConfig {
        serde_json::from_str(
            r#"{"layers":2,"dim":4,"vocab_size":11}"#,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let cfg = cfg();
        let params = init_params::<f32>(&cfg, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &cfg, &params).unwrap();
        let (cfg2, params2) = load_checkpoint::<f32>(&p1).unwrap();
        save_checkpoint(&p2, &cfg2, &params2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // loaded values match exactly in f32
        for ((n1, t1), (_, t2)) in params.named().iter().zip(params2.named().iter()) {
            assert_eq!(t1.data(), t2.data(), "mismatch in {n1}");
        }
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = cfg();
        let params = init_params::<f32>(&cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&p, &cfg, &params).unwrap();
        let good = std::fs::read(&p).unwrap();
        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint::<f32>(&p).is_err());
        // truncation
        std::fs::write(&p, &good[..good.len() - 3]).unwrap();
        assert!(load_checkpoint::<f32>(&p).is_err());
        // trailing garbage
        let mut long = good.clone();
        long.extend_from_slice(b"zz");
        std::fs::write(&p, &long).unwrap();
        assert!(load_checkpoint::<f32>(&p).is_err());
    }

    #[test]
    fn f64_params_saved_as_f32() {
        let cfg = cfg();
        let params = init_params::<f64>(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        save_checkpoint(&p, &cfg, &params).unwrap();
        let (_, loaded) = load_checkpoint::<f64>(&p).unwrap();
        for ((_, a), (_, b)) in params.named().iter().zip(loaded.named().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }
}
