//! `QNAT` binary tensor container and the directory manifest built on it.
//!
//! Layout: `b"QNAT"`, dtype byte (0 = f32, 1 = f64), rank byte, two zero
//! padding bytes, `rank` little-endian u32 dims, then the row-major
//! little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, Scalar, Tensor};
use crate::error::{QnaError, Result};

const MAGIC: &[u8; 4] = b"QNAT";

impl<T: Scalar> Tensor<T> {
    pub fn to_qnat_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + self.nbytes());
        out.extend_from_slice(MAGIC);
        out.push(T::DTYPE.code());
        out.push(self.rank() as u8);
        out.extend_from_slice(&[0, 0]);
        for &d in self.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.data() {
            v.write_le(&mut out);
        }
        out
    }
}

/// A decoded tensor of either dtype.
#[derive(Debug, Clone)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to the requested element type.
    pub fn into_dtype<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_qnat_bytes(bytes: &[u8]) -> Result<AnyTensor> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(QnaError::Format("missing QNAT magic".into()));
        }
        let dtype =
            DType::from_code(bytes[4]).ok_or_else(|| QnaError::Format(format!("unknown dtype byte {}", bytes[4])))?;
        let rank = bytes[5] as usize;
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err(QnaError::Format("truncated dimension table".into()));
        }
        let shape: Vec<usize> = bytes[8..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        let count: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != count * dtype.size() {
            return Err(QnaError::Format(format!(
                "payload is {} bytes, shape {shape:?} needs {}",
                payload.len(),
                count * dtype.size()
            )));
        }
        Ok(match dtype {
            DType::F32 => AnyTensor::F32(decode(shape, payload)?),
            DType::F64 => AnyTensor::F64(decode(shape, payload)?),
        })
    }
}

fn decode<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&tensor.to_qnat_bytes())?;
    Ok(())
}

pub fn read_tensor_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    AnyTensor::from_qnat_bytes(&bytes)
}

/// Reads a tensor, failing if it was stored with a different dtype.
pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let any = read_tensor_any(path)?;
    if any.dtype() != T::DTYPE {
        return Err(QnaError::Format(format!(
            "stored dtype {} does not match requested {}",
            any.dtype().name(),
            T::DTYPE.name()
        )));
    }
    Ok(any.into_dtype())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

/// A directory of named `.qnat` files plus `manifest.json` carrying a JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub config: serde_json::Value,
    pub tensors: Vec<ManifestEntry>,
}

impl TensorManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn write<'a, T: Scalar + 'a>(
        dir: impl AsRef<Path>,
        config: serde_json::Value,
        tensors: impl IntoIterator<Item = (String, &'a Tensor<T>)>,
    ) -> Result<TensorManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, tensor) in tensors {
            let file = format!("{}.qnat", name.replace(['/', '.'], "_"));
            write_tensor(dir.join(&file), tensor)?;
            entries.push(ManifestEntry { name, file, dtype: T::DTYPE, shape: tensor.shape().to_vec() });
        }
        let manifest = TensorManifest { config, tensors: entries };
        fs::write(dir.join(Self::FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<TensorManifest> {
        let text = fs::read_to_string(dir.as_ref().join(Self::FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load<T: Scalar>(&self, dir: impl AsRef<Path>, name: &str) -> Result<Tensor<T>> {
        let entry = self
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| QnaError::Format(format!("manifest has no tensor `{name}`")))?;
        let t: Tensor<T> = read_tensor_any(dir.as_ref().join(&entry.file))?.into_dtype();
        if t.shape() != entry.shape.as_slice() {
            return Err(QnaError::Format(format!("tensor `{name}` shape disagrees with manifest")));
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngSeed;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f32>::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = t.to_qnat_bytes();
        assert_eq!(&bytes[..8], b"QNAT\x00\x02\x00\x00");
        assert_eq!(&bytes[8..16], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 24);
        let d = Tensor::<f64>::ones([1]).unwrap().to_qnat_bytes();
        assert_eq!(d[4], 1);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(AnyTensor::from_qnat_bytes(b"NOPE0000").is_err());
        let mut bytes = Tensor::<f64>::ones([2]).unwrap().to_qnat_bytes();
        bytes.pop();
        assert!(matches!(AnyTensor::from_qnat_bytes(&bytes), Err(QnaError::Format(_))));
        bytes[4] = 7;
        assert!(AnyTensor::from_qnat_bytes(&bytes).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::<f64>::randn([2, 2], 1.0, &mut RngSeed(1).rng()).unwrap();
        let b = Tensor::<f64>::ones([3]).unwrap();
        let cfg = serde_json::json!({"k": 3});
        TensorManifest::write(dir.path(), cfg.clone(), [("a".to_string(), &a), ("blk.b".to_string(), &b)]).unwrap();
        let m = TensorManifest::read(dir.path()).unwrap();
        assert_eq!(m.config, cfg);
        assert!(m.load::<f64>(dir.path(), "a").unwrap().bit_eq(&a));
        assert!(m.load::<f64>(dir.path(), "blk.b").unwrap().bit_eq(&b));
        assert!(m.load::<f64>(dir.path(), "missing").is_err());
    }

    proptest! {
        #[test]
        fn bytes_roundtrip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let t = Tensor::<f64>::randn(dims, 10.0, &mut RngSeed(seed).rng()).unwrap();
            match AnyTensor::from_qnat_bytes(&t.to_qnat_bytes()).unwrap() {
                AnyTensor::F64(back) => prop_assert!(back.bit_eq(&t)),
                AnyTensor::F32(_) => prop_assert!(false),
            }
            let f: Tensor<f32> = t.cast();
            match AnyTensor::from_qnat_bytes(&f.to_qnat_bytes()).unwrap() {
                AnyTensor::F32(back) => prop_assert!(back.bit_eq(&f)),
                AnyTensor::F64(_) => prop_assert!(false),
            }
        }
    }
}
