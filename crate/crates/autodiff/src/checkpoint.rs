//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//!   magic "TNAS" | version u32 | tensor count u32
//!   per tensor: name length u32 | UTF-8 name | dtype tag u32 (0=f32, 1=f64)
//!               | rank u32 | extents u64 each | raw little-endian values
//!
//! Round-trips are bit-exact: values are written and read as raw IEEE bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{AdError, Result};
use crate::params::ParamStore;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TNAS";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, name, tensor) in store.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&T::DTYPE.tag().to_le_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &extent in tensor.shape() {
            w.write_all(&(extent as u64).to_le_bytes())?;
        }
        for &v in tensor.values() {
            w.write_all(&v.to_le_bytes_vec())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load a checkpoint whose tensors are all of element type `T`. The
/// `requires_grad` flag is not part of the format; callers re-mark
/// parameters after loading.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(AdError::Checkpoint(format!(
            "bad magic {:02x?}, expected {:02x?}",
            magic, CHECKPOINT_MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(AdError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| AdError::Checkpoint(format!("invalid tensor name: {e}")))?;
        let tag = read_u32(&mut r)?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| AdError::Checkpoint(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(AdError::Checkpoint(format!(
                "tensor {name:?} has dtype tag {tag}, expected {}",
                T::DTYPE.tag()
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * T::width()];
        r.read_exact(&mut raw)?;
        let values: Vec<T> = raw
            .chunks_exact(T::width())
            .map(T::from_le_slice)
            .collect();
        store.insert(name, Tensor::from_vec(shape, values)?);
    }
    Ok(store)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bit_exact() {
        let dir = std::env::temp_dir().join("tnas_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.tnas");

        let mut store = ParamStore::<f64>::new();
        // Values chosen to stress exactness: subnormals, negative zero, pi.
        store.insert(
            "layer/storage",
            Tensor::from_vec(vec![2, 2], vec![std::f64::consts::PI, -0.0, 1e-310, 3.5]).unwrap(),
        );
        store.insert("bias_storage", Tensor::from_vec(vec![1], vec![42.0]).unwrap());
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        for (_, name, tensor) in store.iter() {
            let got = loaded.get(loaded.lookup(name).unwrap());
            assert_eq!(got.shape(), tensor.shape());
            for (a, b) in got.values().iter().zip(tensor.values()) {
                assert_eq!(a.to_bits(), b.to_bits(), "bit mismatch in {name}");
            }
        }
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn bad_magic_reports_observed() {
        let dir = std::env::temp_dir().join("tnas_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad_magic.tnas");
        std::fs::write(&path, b"NOPE____________").unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad magic"), "{msg}");
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let dir = std::env::temp_dir().join("tnas_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dtype.tnas");
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::from_vec(vec![1], vec![1.0f32]).unwrap());
        save_checkpoint(&store, &path).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        assert!(load_checkpoint::<f32>(&path).is_ok());
        std::fs::remove_file(&path).unwrap();
    }
}
