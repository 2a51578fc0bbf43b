//! Versioned checkpoint container shared by every module that persists
//! parameters: a little-endian u64 header length, a JSON header mapping
//! tensor names to {shape, dtype, byte_offset}, then raw little-endian
//! values. Offsets are relative to the start of the payload section.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Element, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: BTreeMap<String, HeaderEntry>,
}

/// Write named tensors to `path`. Names must be unique; entries are laid
/// out in name order so files are byte-stable.
pub fn save<T: Element>(path: &Path, named: &[(String, Tensor<T>)]) -> Result<()> {
    let mut sorted: BTreeMap<String, &Tensor<T>> = BTreeMap::new();
    for (name, t) in named {
        if sorted.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
    }
    let mut tensors = BTreeMap::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in &sorted {
        let offset = payload.len() as u64;
        for v in t.data().iter() {
            match T::DTYPE {
                Dtype::F32 => payload.extend_from_slice(&(v.to_f64_() as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_f64_().to_le_bytes()),
            }
        }
        tensors.insert(
            name.clone(),
            HeaderEntry {
                shape: t.shape().to_vec(),
                dtype: T::DTYPE.name().to_string(),
                byte_offset: offset,
            },
        );
    }
    let header = serde_json::to_vec(&Header {
        version: CHECKPOINT_VERSION,
        tensors,
    })?;
    let mut f = File::create(path)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&payload)?;
    Ok(())
}

/// Load a checkpoint into existing tensors (matched by name). Shapes and
/// dtype must agree exactly.
pub fn load_into<T: Element>(path: &Path, named: &[(String, Tensor<T>)]) -> Result<()> {
    let (header, payload) = read_raw(path)?;
    for (name, t) in named {
        let entry = header
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from {path:?}")))?;
        if entry.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} in file, {:?} expected",
                entry.shape,
                t.shape()
            )));
        }
        if entry.dtype != T::DTYPE.name() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: dtype {} in file, {} expected",
                entry.dtype,
                T::DTYPE.name()
            )));
        }
        let n = t.numel();
        let start = entry.byte_offset as usize;
        let width = T::DTYPE.size();
        let end = start + n * width;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: payload truncated"
            )));
        }
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let b = &payload[start + i * width..start + (i + 1) * width];
            let v = match T::DTYPE {
                Dtype::F32 => f32::from_le_bytes(b.try_into().unwrap()) as f64,
                Dtype::F64 => f64::from_le_bytes(b.try_into().unwrap()),
            };
            values.push(T::from_f64(v));
        }
        t.set_data(&values);
    }
    Ok(())
}

/// Tensor names and shapes stored in a checkpoint.
pub fn describe(path: &Path) -> Result<Vec<(String, Vec<usize>, String)>> {
    let (header, _) = read_raw(path)?;
    Ok(header
        .tensors
        .into_iter()
        .map(|(name, e)| (name, e.shape, e.dtype))
        .collect())
}

fn read_raw(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut f = File::open(path)?;
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_f32_and_f64() {
        let dir = tempdir().unwrap();
        let p32 = dir.path().join("a.ckpt");
        let w = Tensor::<f32>::param(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 7.0, -0.25]).unwrap();
        let b = Tensor::<f32>::param(&[3], vec![0.1, 0.2, 0.3]).unwrap();
        save(&p32, &[("w".into(), w.clone()), ("b".into(), b.clone())]).unwrap();
        let w2 = Tensor::<f32>::param(&[2, 3], vec![0.0; 6]).unwrap();
        let b2 = Tensor::<f32>::param(&[3], vec![0.0; 3]).unwrap();
        load_into(&p32, &[("w".into(), w2.clone()), ("b".into(), b2.clone())]).unwrap();
        assert_eq!(w.to_vec(), w2.to_vec());
        assert_eq!(b.to_vec(), b2.to_vec());

        let p64 = dir.path().join("b.ckpt");
        let t = Tensor::<f64>::param(&[4], vec![1e-300, -1.0, 0.5, 2.0_f64.powi(60)]).unwrap();
        save(&p64, &[("t".into(), t.clone())]).unwrap();
        let t2 = Tensor::<f64>::param(&[4], vec![0.0; 4]).unwrap();
        load_into(&p64, &[("t".into(), t2.clone())]).unwrap();
        assert_eq!(t.to_vec(), t2.to_vec());
    }

    #[test]
    fn shape_and_name_mismatches_error() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let t = Tensor::<f32>::param(&[2], vec![1.0, 2.0]).unwrap();
        save(&p, &[("t".into(), t)]).unwrap();
        let wrong_shape = Tensor::<f32>::param(&[3], vec![0.0; 3]).unwrap();
        assert!(load_into(&p, &[("t".into(), wrong_shape)]).is_err());
        let missing = Tensor::<f32>::param(&[2], vec![0.0; 2]).unwrap();
        assert!(load_into(&p, &[("nope".into(), missing)]).is_err());
        let wrong_dtype = Tensor::<f64>::param(&[2], vec![0.0; 2]).unwrap();
        assert!(load_into::<f64>(&p, &[("t".into(), wrong_dtype)]).is_err());
    }

    #[test]
    fn describe_lists_entries() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        let t = Tensor::<f32>::param(&[2, 2], vec![0.0; 4]).unwrap();
        save(&p, &[("enc.w".into(), t)]).unwrap();
        let entries = describe(&p).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].0, "enc.w");
        assert_eq!(entries[0].1, vec![2, 2]);
        assert_eq!(entries[0].2, "f32");
    }
}
