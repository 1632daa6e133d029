//! JSON parameter files: dense arrays are stored as base64 little-endian floats
//! with their dtype and shape.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorParam {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub data: String,
}

impl TensorParam {
    pub fn from_f32(values: &[f32], shape: &[usize]) -> Self {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dtype: "f32".into(),
            shape: shape.to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn from_f64(values: &[f64], shape: &[usize]) -> Self {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dtype: "f64".into(),
            shape: shape.to_vec(),
            data: STANDARD.encode(bytes),
        }
    }

    fn bytes(&self, width: usize) -> Result<Vec<u8>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Invalid(format!("bad base64 tensor: {e}")))?;
        let n: usize = self.shape.iter().product();
        if bytes.len() != n * width {
            return Err(Error::Invalid(format!(
                "tensor of shape {:?} has {} bytes",
                self.shape,
                bytes.len()
            )));
        }
        Ok(bytes)
    }

    pub fn to_f32(&self) -> Result<Vec<f32>> {
        match self.dtype.as_str() {
            "f32" => Ok(self
                .bytes(4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect()),
            "f64" => Ok(self.to_f64()?.into_iter().map(|v| v as f32).collect()),
            d => Err(Error::Invalid(format!("unsupported dtype {d}"))),
        }
    }

    pub fn to_f64(&self) -> Result<Vec<f64>> {
        match self.dtype.as_str() {
            "f64" => Ok(self
                .bytes(8)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect()),
            "f32" => Ok(self.to_f32()?.into_iter().map(f64::from).collect()),
            d => Err(Error::Invalid(format!("unsupported dtype {d}"))),
        }
    }
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
