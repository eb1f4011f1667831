//! Self-describing checkpoint container: `PSSMCKPT` magic, a format
//! version, a JSON header (model config, dataset normalization statistics,
//! array index), then the named arrays as little-endian raw values.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PolyMamba};
use crate::numerics::{DType, Elem, Tensor};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"PSSMCKPT";
const VERSION: u32 = 1;

/// Dataset-level normalization carried alongside the weights so a
/// checkpoint can forecast raw CSV data directly.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct NormMeta {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub channel_names: Vec<String>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len_bytes: usize,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub dtype: DType,
    pub config: ModelConfig,
    pub norm: Option<NormMeta>,
    pub arrays: Vec<ArrayMeta>,
}

pub fn save_checkpoint<T: Elem>(
    path: impl AsRef<Path>,
    model: &PolyMamba<T>,
    norm: Option<&NormMeta>,
) -> Result<()> {
    let mut arrays = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (_, p) in model.store.iter() {
        let offset = blob.len();
        for v in p.value.data() {
            v.write_le(&mut blob);
        }
        arrays.push(ArrayMeta {
            name: p.name.clone(),
            dtype: T::DTYPE,
            shape: p.value.shape().to_vec(),
            offset,
            len_bytes: blob.len() - offset,
        });
    }
    let meta = CheckpointMeta {
        dtype: T::DTYPE,
        config: model.cfg.clone(),
        norm: norm.cloned(),
        arrays,
    };
    let header = serde_json::to_vec(&meta)
        .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&blob)?;
    Ok(())
}

fn read_meta(bytes: &[u8]) -> Result<(CheckpointMeta, usize)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::data("not a polyssm checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + header_len {
        return Err(Error::data("truncated checkpoint header"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[20..20 + header_len])
        .map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
    Ok((meta, 20 + header_len))
}

/// Reads only the header; used to decide the dtype before loading.
pub fn peek_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(read_meta(&bytes)?.0)
}

pub fn load_checkpoint<T: Elem>(
    path: impl AsRef<Path>,
) -> Result<(PolyMamba<T>, Option<NormMeta>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (meta, data_start) = read_meta(&bytes)?;
    if meta.dtype != T::DTYPE {
        return Err(Error::data(format!(
            "checkpoint dtype is {}, expected {}",
            meta.dtype,
            T::DTYPE
        )));
    }
    let mut model = PolyMamba::<T>::new(meta.config.clone(), 0)?;
    let elem = T::DTYPE.size_bytes();
    for am in &meta.arrays {
        let id = model.store.lookup(&am.name).ok_or_else(|| {
            Error::data(format!("checkpoint array `{}` has no matching parameter", am.name))
        })?;
        let expect = model.store.value(id).shape().to_vec();
        if expect != am.shape {
            return Err(Error::data(format!(
                "checkpoint array `{}` shape {:?} does not match model {:?}",
                am.name, am.shape, expect
            )));
        }
        let lo = data_start + am.offset;
        let hi = lo + am.len_bytes;
        if hi > bytes.len() || am.len_bytes != expect.iter().product::<usize>() * elem {
            return Err(Error::data(format!("checkpoint array `{}` out of bounds", am.name)));
        }
        let data: Vec<T> = bytes[lo..hi].chunks_exact(elem).map(T::read_le).collect();
        *model.store.value_mut(id) = Tensor::from_vec(expect, data)?;
    }
    Ok((model, meta.norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PatchConfig;
    use crate::polyops::PolyVariant;
    use crate::sscan::ScanMode;

    #[test]
    fn roundtrip_preserves_weights_and_predictions() {
        let cfg = ModelConfig {
            channels: 2,
            d_model: 4,
            d_state: 3,
            layers: 1,
            d_inner: 4,
            horizon: 4,
            dropout: 0.0,
            patch: PatchConfig {
                patch_len: 4,
                stride: 4,
                lookback: 16,
            },
            variant: PolyVariant::Full,
            instance_norm: true,
        };
        let model = PolyMamba::<f32>::new(cfg, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let norm = NormMeta {
            mean: vec![0.5, -0.5],
            std: vec![1.0, 2.0],
            channel_names: vec!["a".into(), "b".into()],
        };
        save_checkpoint(&path, &model, Some(&norm)).unwrap();

        let (loaded, norm2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(norm2.unwrap().mean, norm.mean);
        for ((_, a), (_, b)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.data(), b.value.data());
        }
        let x = Tensor::<f32>::from_fn(&[1, 2, 16], |i| (i as f32).sin());
        let ya = model.predict(&x, ScanMode::Sequential).unwrap();
        let yb = loaded.predict(&x, ScanMode::Sequential).unwrap();
        assert_eq!(ya.data(), yb.data());

        // wrong dtype is rejected
        assert!(load_checkpoint::<f64>(&path).is_err());
        // header peek reports the dtype
        assert_eq!(peek_checkpoint(&path).unwrap().dtype, DType::F32);
    }
}
