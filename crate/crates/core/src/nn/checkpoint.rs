use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blob;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// Named float32 tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::with_capacity(ckpt.tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &ckpt.tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() * 4,
        });
        payload.extend_from_slice(t.data());
    }
    let header = Header {
        dtype: "f32le".into(),
        meta: ckpt.meta.clone(),
        tensors: entries,
    };
    blob::write(path, &header, &payload)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, payload): (Header, Vec<f32>) = blob::read(path)?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset / 4;
        let data = payload
            .get(start..start + n)
            .ok_or_else(|| {
                Error::Format(format!("{}: tensor `{}` overruns payload", path.display(), e.name))
            })?
            .to_vec();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Checkpoint {
        meta: header.meta,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let ckpt = Checkpoint {
            meta: serde_json::json!({"step": 3}),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2], vec![f32::MIN_POSITIVE, -0.0]).unwrap()),
                ("b".into(), Tensor::new(vec![1, 3], vec![1.0 / 3.0, 1e-38, 7.5]).unwrap()),
            ],
        };
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        for ((_, x), (_, y)) in back.tensors.iter().zip(&ckpt.tensors) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }
}
