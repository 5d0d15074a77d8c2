//! Single-file named-tensor container (safetensors) with a JSON metadata
//! record, used for checkpoints, trajectories and prompt stacks.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hash::write_atomic;
use crate::tensor::{Scalar, Tensor};

const META_KEY: &str = "record";

fn dtype_of<T: Scalar>() -> Dtype {
    if T::NAME == "f64" {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

/// Serializes `tensors` plus `meta` into container bytes.
pub fn encode<T: Scalar, M: Serialize>(tensors: &[(String, &Tensor<T>)], meta: &M) -> Result<Vec<u8>> {
    let bytes: Vec<Vec<u8>> = tensors.iter().map(|(_, t)| t.to_le_bytes()).collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((name, t), b)| Ok((name.clone(), TensorView::new(dtype_of::<T>(), t.shape().to_vec(), b)?)))
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    Ok(safetensors::serialize(views, Some(info))?)
}

pub fn write<T: Scalar, M: Serialize>(path: &Path, tensors: &[(String, &Tensor<T>)], meta: &M) -> Result<()> {
    write_atomic(path, &encode(tensors, meta)?)
}

fn decode_view<T: Scalar>(name: &str, v: &TensorView<'_>) -> Result<Tensor<T>> {
    let data: Vec<T> = match v.dtype() {
        Dtype::F32 => v
            .data()
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => v
            .data()
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
        other => return Err(Error::Load(format!("tensor {name}: unsupported dtype {other:?}"))),
    };
    Tensor::new(v.shape(), data)
}

/// Parses container bytes into tensors (converted to `T`) and the metadata record.
pub fn decode<T: Scalar, M: DeserializeOwned>(bytes: &[u8]) -> Result<(BTreeMap<String, Tensor<T>>, M)> {
    let (_, header) = SafeTensors::read_metadata(bytes)?;
    let meta_text = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Load("container has no metadata record".into()))?;
    let meta: M = serde_json::from_str(meta_text).map_err(|e| Error::Load(format!("bad metadata record: {e}")))?;
    let st = SafeTensors::deserialize(bytes)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.iter() {
        out.insert(name.to_string(), decode_view(name, &view)?);
    }
    Ok((out, meta))
}

pub fn read<T: Scalar, M: DeserializeOwned>(path: &Path) -> Result<(BTreeMap<String, Tensor<T>>, M)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
        other => Error::Load(format!("{}: {other}", path.display())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_keeps_bits_and_metadata() {
        let a = Tensor::<f32>::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap();
        let b = Tensor::<f32>::new(&[3], vec![7.0, 8.0, 9.0]).unwrap();
        let meta = serde_json::json!({"kind": "test", "n": 2});
        let bytes = encode(&[("a".into(), &a), ("b".into(), &b)], &meta).unwrap();
        let (t, m): (_, serde_json::Value) = decode::<f32, _>(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(t["a"].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(t["b"], b);
    }

    #[test]
    fn corrupt_bytes_are_a_load_error() {
        assert!(decode::<f32, serde_json::Value>(b"not a container").is_err());
    }
}
