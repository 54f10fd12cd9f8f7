//! JSON model container with base64 little-endian parameter blobs.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{QnnError, Result};
use crate::fixedpoint::{QFormat, QTensor};
use crate::linear::Padding;
use crate::network::{Activation, AffineKind, AffineLayer, Layer, QNetwork};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    version: u32,
    input_shape: Vec<usize>,
    input_format: QFormat,
    layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerEntry {
    Flatten,
    Dense(AffineEntry),
    Conv2d {
        input_hw: (usize, usize),
        stride: usize,
        padding: Padding,
        #[serde(flatten)]
        affine: AffineEntry,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct AffineEntry {
    weights: Blob,
    bias: Blob,
    rescale_shift: u32,
    clamp_bits: u32,
    out_frac_bits: u32,
    activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    I32le,
    I64le,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Blob {
    shape: Vec<usize>,
    format: QFormat,
    dtype: Dtype,
    data: String,
}

impl Blob {
    fn encode(t: &QTensor) -> Blob {
        let narrow = t.raw.iter().all(|v| i32::try_from(*v).is_ok());
        let bytes: Vec<u8> = if narrow {
            t.raw.iter().flat_map(|v| (*v as i32).to_le_bytes()).collect()
        } else {
            t.raw.iter().flat_map(|v| v.to_le_bytes()).collect()
        };
        Blob {
            shape: t.shape.clone(),
            format: t.format,
            dtype: if narrow { Dtype::I32le } else { Dtype::I64le },
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self) -> Result<QTensor> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| QnnError::ModelFormat(format!("bad base64: {e}")))?;
        let width = match self.dtype {
            Dtype::I32le => 4,
            Dtype::I64le => 8,
        };
        if bytes.len() % width != 0 {
            return Err(QnnError::ModelFormat(format!(
                "blob of {} bytes is not a whole number of {width}-byte values",
                bytes.len()
            )));
        }
        let raw = bytes
            .chunks_exact(width)
            .map(|c| match self.dtype {
                Dtype::I32le => i32::from_le_bytes(c.try_into().expect("4 bytes")) as i64,
                Dtype::I64le => i64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        QTensor::new(self.shape.clone(), raw, self.format)
    }
}

impl AffineEntry {
    fn encode(a: &AffineLayer) -> AffineEntry {
        AffineEntry {
            weights: Blob::encode(&a.weights),
            bias: Blob::encode(&a.bias),
            rescale_shift: a.rescale_shift,
            clamp_bits: a.clamp_bits,
            out_frac_bits: a.out_frac_bits,
            activation: a.activation.clone(),
        }
    }
}

/// Serializes `net` as pretty-printed JSON.
pub fn model_to_json(net: &QNetwork) -> String {
    let file = ModelFile {
        version: MODEL_VERSION,
        input_shape: net.input_shape().to_vec(),
        input_format: net.input_format(),
        layers: net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Flatten => LayerEntry::Flatten,
                Layer::Affine(a) => match &a.kind {
                    AffineKind::Dense => LayerEntry::Dense(AffineEntry::encode(a)),
                    AffineKind::Conv2d {
                        input_hw,
                        stride,
                        padding,
                    } => LayerEntry::Conv2d {
                        input_hw: *input_hw,
                        stride: *stride,
                        padding: *padding,
                        affine: AffineEntry::encode(a),
                    },
                },
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
    s.push('\n');
    s
}

/// Parses and validates a model file.
pub fn model_from_json(s: &str) -> Result<QNetwork> {
    let v: serde_json::Value =
        serde_json::from_str(s).map_err(|e| QnnError::ModelFormat(e.to_string()))?;
    match v.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == MODEL_VERSION as u64 => {}
        Some(v) => {
            return Err(QnnError::ModelFormat(format!(
                "unsupported version {v} (expected {MODEL_VERSION})"
            )))
        }
        None => return Err(QnnError::ModelFormat("missing version".into())),
    }
    let file: ModelFile =
        serde_json::from_value(v).map_err(|e| QnnError::ModelFormat(e.to_string()))?;
    let mut layers = Vec::with_capacity(file.layers.len());
    for (i, entry) in file.layers.into_iter().enumerate() {
        let ctx = |e: QnnError| QnnError::ModelFormat(format!("layer {i}: {e}"));
        let layer = match entry {
            LayerEntry::Flatten => Layer::Flatten,
            LayerEntry::Dense(a) => Layer::Affine(
                AffineLayer::dense(
                    a.weights.decode().map_err(ctx)?,
                    a.bias.decode().map_err(ctx)?,
                    a.rescale_shift,
                    a.clamp_bits,
                    a.out_frac_bits,
                    a.activation,
                )
                .map_err(ctx)?,
            ),
            LayerEntry::Conv2d {
                input_hw,
                stride,
                padding,
                affine: a,
            } => Layer::Affine(
                AffineLayer::conv2d(
                    a.weights.decode().map_err(ctx)?,
                    a.bias.decode().map_err(ctx)?,
                    input_hw,
                    stride,
                    padding,
                    a.rescale_shift,
                    a.clamp_bits,
                    a.out_frac_bits,
                    a.activation,
                )
                .map_err(ctx)?,
            ),
        };
        layers.push(layer);
    }
    QNetwork::new(file.input_shape, file.input_format, layers)
        .map_err(|e| QnnError::ModelFormat(e.to_string()))
}

pub fn save_model(net: &QNetwork, path: &Path) -> Result<()> {
    super::write_file(path, model_to_json(net).as_bytes())
}

pub fn load_model(path: &Path) -> Result<QNetwork> {
    let bytes = super::read_file(path)?;
    let s = std::str::from_utf8(&bytes)
        .map_err(|e| QnnError::ModelFormat(format!("{}: {e}", path.display())))?;
    model_from_json(s)
}
