//! Model persistence: a JSON manifest describing layers, plus a flat blob of
//! little-endian `f32` weights referenced by byte offset.
//!
//! ```json
//! {
//!   "format": "rebirth-model",
//!   "version": 1,
//!   "outputs": ["prob"],
//!   "layers": [
//!     { "id": "data", "kind": "Input", "inputs": [], "params": { "c": 3, "h": 32, "w": 32 } },
//!     { "id": "conv1", "kind": "Conv", "inputs": ["data"],
//!       "params": { "out_channels": 16, "in_channels": 3, "kernel": [5, 5], "stride": [1, 1], "pad": [2, 2] },
//!       "blobs": [ { "name": "weights", "offset": 0, "count": 1200 },
//!                  { "name": "bias", "offset": 4800, "count": 16 } ] }
//!   ]
//! }
//! ```
//!
//! Layers are written in topological order and their blobs are concatenated
//! in the same order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{infer_shapes, topo_order, Chw, GraphError, LayerKind, LayerNode, ModelGraph};
use crate::params::{BnParams, ConvParams, FcParams, LrnParams, PoolMode, PoolParams, ScaleParams};
use crate::tensor::{Hw, Tensor4};

pub const FORMAT: &str = "rebirth-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported manifest format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("layer '{layer}': {message}")]
    Layer { layer: String, message: String },
    #[error("layer '{layer}': blob '{blob}' needs bytes {start}..{end} but the weight file has {available}")]
    BlobLength {
        layer: String,
        blob: String,
        start: u64,
        end: u64,
        available: usize,
    },
    #[error("weight file has {actual} bytes but the manifest accounts for {expected}")]
    BlobSize { expected: u64, actual: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("manifest serialization failed: {0}")]
    Serialize(String),
}

impl From<serde_json::Error> for ModelIoError {
    fn from(e: serde_json::Error) -> Self {
        ModelIoError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    outputs: Vec<String>,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum KindTag {
    Input,
    Conv,
    Pool,
    Lrn,
    BatchNorm,
    Scale,
    Relu,
    Softmax,
    InnerProduct,
    Concat,
    Dropout,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    id: String,
    kind: KindTag,
    inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Params::is_empty")]
    params: Params,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    blobs: Vec<BlobRef>,
}

/// Union of every kind's scalar parameters. Floats are stored as `f64` so
/// `f32` values survive the decimal round trip exactly.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    w: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pad: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<PoolMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    local_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_features: Option<usize>,
}

impl Params {
    fn is_empty(&self) -> bool {
        serde_json::to_value(self)
            .map(|v| v.as_object().is_some_and(|o| o.is_empty()))
            .unwrap_or(false)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobRef {
    name: String,
    /// Byte offset into the weight file.
    offset: u64,
    /// Number of `f32` values.
    count: u64,
}

fn hw(v: [usize; 2]) -> Hw {
    Hw::new(v[0], v[1])
}

fn pair(v: Hw) -> [usize; 2] {
    [v.h, v.w]
}

/// Reads named blobs of a layer while checking their sizes and bounds.
struct BlobReader<'a> {
    layer: &'a LayerRecord,
    data: &'a [u8],
}

impl BlobReader<'_> {
    fn err(&self, message: impl Into<String>) -> ModelIoError {
        ModelIoError::Layer {
            layer: self.layer.id.clone(),
            message: message.into(),
        }
    }

    fn read(&self, name: &str, expected: Option<usize>) -> Result<Vec<f32>, ModelIoError> {
        let blob = self
            .layer
            .blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| self.err(format!("missing blob '{name}'")))?;
        let expected = expected.ok_or_else(|| self.err(format!("blob '{name}' size overflows")))?;
        if blob.count != expected as u64 {
            return Err(self.err(format!(
                "blob '{name}' has {} values, expected {expected}",
                blob.count
            )));
        }
        if blob.offset % 4 != 0 {
            return Err(self.err(format!("blob '{name}' offset {} is not 4-byte aligned", blob.offset)));
        }
        let end = blob
            .count
            .checked_mul(4)
            .and_then(|b| b.checked_add(blob.offset))
            .ok_or_else(|| self.err(format!("blob '{name}' range overflows")))?;
        if end > self.data.len() as u64 {
            return Err(ModelIoError::BlobLength {
                layer: self.layer.id.clone(),
                blob: name.to_string(),
                start: blob.offset,
                end,
                available: self.data.len(),
            });
        }
        let bytes = &self.data[blob.offset as usize..end as usize];
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn need<T>(layer: &LayerRecord, name: &str, v: Option<T>) -> Result<T, ModelIoError> {
    v.ok_or_else(|| ModelIoError::Layer {
        layer: layer.id.clone(),
        message: format!("{:?} layer is missing parameter '{name}'", layer.kind),
    })
}

fn mul(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

fn decode_layer(rec: &LayerRecord, data: &[u8]) -> Result<LayerKind, ModelIoError> {
    let p = &rec.params;
    let blobs = BlobReader { layer: rec, data };
    let invalid = |e: crate::tensor::ShapeError| ModelIoError::Layer {
        layer: rec.id.clone(),
        message: e.to_string(),
    };
    let kind = match rec.kind {
        KindTag::Input => LayerKind::Input(Chw::new(
            need(rec, "c", p.c)?,
            need(rec, "h", p.h)?,
            need(rec, "w", p.w)?,
        )),
        KindTag::Conv => {
            let o = need(rec, "out_channels", p.out_channels)?;
            let i = need(rec, "in_channels", p.in_channels)?;
            let k = hw(need(rec, "kernel", p.kernel)?);
            let weights = blobs.read("weights", mul(&[o, i, k.h, k.w]))?;
            let bias = blobs.read("bias", Some(o))?;
            let weights = Tensor4::new(o, i, k.h, k.w, weights).map_err(invalid)?;
            LayerKind::Conv(
                ConvParams::new(
                    weights,
                    bias,
                    hw(need(rec, "stride", p.stride)?),
                    hw(need(rec, "pad", p.pad)?),
                )
                .map_err(invalid)?,
            )
        }
        KindTag::Pool => {
            let pool = PoolParams {
                mode: need(rec, "mode", p.mode)?,
                kernel: hw(need(rec, "kernel", p.kernel)?),
                stride: hw(need(rec, "stride", p.stride)?),
                pad: hw(need(rec, "pad", p.pad)?),
            };
            pool.validate().map_err(invalid)?;
            LayerKind::Pool(pool)
        }
        KindTag::Lrn => {
            let lrn = LrnParams {
                local_size: need(rec, "local_size", p.local_size)?,
                alpha: need(rec, "alpha", p.alpha)? as f32,
                beta_exp: need(rec, "beta", p.beta)? as f32,
                k: need(rec, "k", p.k)? as f32,
            };
            lrn.validate().map_err(invalid)?;
            LayerKind::Lrn(lrn)
        }
        KindTag::BatchNorm => {
            let c = need(rec, "channels", p.channels)?;
            let bn = BnParams {
                mean: blobs.read("mean", Some(c))?,
                var: blobs.read("var", Some(c))?,
                eps: need(rec, "eps", p.eps)? as f32,
            };
            bn.validate().map_err(invalid)?;
            LayerKind::BatchNorm(bn)
        }
        KindTag::Scale => {
            let c = need(rec, "channels", p.channels)?;
            LayerKind::Scale(ScaleParams {
                gamma: blobs.read("gamma", Some(c))?,
                beta: blobs.read("beta", Some(c))?,
            })
        }
        KindTag::InnerProduct => {
            let o = need(rec, "out_features", p.out_features)?;
            let i = need(rec, "in_features", p.in_features)?;
            LayerKind::InnerProduct(FcParams {
                out_features: o,
                in_features: i,
                weights: blobs.read("weights", mul(&[o, i]))?,
                bias: blobs.read("bias", Some(o))?,
            })
        }
        KindTag::Relu => LayerKind::Relu,
        KindTag::Softmax => LayerKind::Softmax,
        KindTag::Concat => LayerKind::Concat,
        KindTag::Dropout => LayerKind::Dropout,
    };
    Ok(kind)
}

/// Decodes a model from manifest text and weight bytes.
///
/// Rejects malformed JSON (with line and column), unknown kinds or fields,
/// blobs that fall outside the weight data, weight data with unaccounted
/// trailing bytes, structurally invalid graphs, and graphs whose shapes do
/// not infer.
pub fn parse_model(manifest: &str, weights: &[u8]) -> Result<ModelGraph, ModelIoError> {
    let m: Manifest = serde_json::from_str(manifest)?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(ModelIoError::Format {
            format: m.format,
            version: m.version,
        });
    }
    let mut g = ModelGraph::new();
    let mut accounted: u64 = 0;
    for rec in &m.layers {
        let kind = decode_layer(rec, weights)?;
        accounted += rec.blobs.iter().map(|b| b.count * 4).sum::<u64>();
        g.add(LayerNode {
            id: rec.id.clone(),
            kind,
            inputs: rec.inputs.clone(),
        })?;
    }
    if accounted != weights.len() as u64 {
        return Err(ModelIoError::BlobSize {
            expected: accounted,
            actual: weights.len(),
        });
    }
    g.set_outputs(m.outputs);
    g.check()?;
    infer_shapes(&g, g.input_shape()?)?;
    Ok(g)
}

/// Encodes a model as (manifest text, weight bytes).
pub fn write_model(g: &ModelGraph) -> Result<(String, Vec<u8>), ModelIoError> {
    g.check()?;
    let mut blob: Vec<u8> = Vec::new();
    let mut layers = Vec::with_capacity(g.len());
    for id in topo_order(g)? {
        let node = g.node(&id)?;
        let mut params = Params::default();
        let mut refs = Vec::new();
        let mut put = |name: &str, values: &[f32]| {
            refs.push(BlobRef {
                name: name.to_string(),
                offset: blob.len() as u64,
                count: values.len() as u64,
            });
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        let kind = match &node.kind {
            LayerKind::Input(s) => {
                (params.c, params.h, params.w) = (Some(s.c), Some(s.h), Some(s.w));
                KindTag::Input
            }
            LayerKind::Conv(p) => {
                params.out_channels = Some(p.out_channels());
                params.in_channels = Some(p.in_channels());
                params.kernel = Some(pair(p.kernel()));
                params.stride = Some(pair(p.stride));
                params.pad = Some(pair(p.pad));
                put("weights", p.weights.data());
                put("bias", &p.bias);
                KindTag::Conv
            }
            LayerKind::Pool(p) => {
                params.mode = Some(p.mode);
                params.kernel = Some(pair(p.kernel));
                params.stride = Some(pair(p.stride));
                params.pad = Some(pair(p.pad));
                KindTag::Pool
            }
            LayerKind::Lrn(p) => {
                params.local_size = Some(p.local_size);
                params.alpha = Some(p.alpha as f64);
                params.beta = Some(p.beta_exp as f64);
                params.k = Some(p.k as f64);
                KindTag::Lrn
            }
            LayerKind::BatchNorm(p) => {
                params.channels = Some(p.channels());
                params.eps = Some(p.eps as f64);
                put("mean", &p.mean);
                put("var", &p.var);
                KindTag::BatchNorm
            }
            LayerKind::Scale(p) => {
                params.channels = Some(p.channels());
                put("gamma", &p.gamma);
                put("beta", &p.beta);
                KindTag::Scale
            }
            LayerKind::InnerProduct(p) => {
                params.out_features = Some(p.out_features);
                params.in_features = Some(p.in_features);
                put("weights", &p.weights);
                put("bias", &p.bias);
                KindTag::InnerProduct
            }
            LayerKind::Relu => KindTag::Relu,
            LayerKind::Softmax => KindTag::Softmax,
            LayerKind::Concat => KindTag::Concat,
            LayerKind::Dropout => KindTag::Dropout,
        };
        layers.push(LayerRecord {
            id: node.id.clone(),
            kind,
            inputs: node.inputs.clone(),
            params,
            blobs: refs,
        });
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        outputs: g.output_ids().to_vec(),
        layers,
    };
    let mut text =
        serde_json::to_string_pretty(&manifest).map_err(|e| ModelIoError::Serialize(e.to_string()))?;
    text.push('\n');
    Ok((text, blob))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelIoError + '_ {
    move |source| ModelIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_model(manifest_path: &Path, weights_path: &Path) -> Result<ModelGraph, ModelIoError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let blob = fs::read(weights_path).map_err(io_err(weights_path))?;
    parse_model(&text, &blob)
}

pub fn save_model(g: &ModelGraph, manifest_path: &Path, weights_path: &Path) -> Result<(), ModelIoError> {
    let (text, blob) = write_model(g)?;
    fs::write(manifest_path, text).map_err(io_err(manifest_path))?;
    fs::write(weights_path, blob).map_err(io_err(weights_path))?;
    Ok(())
}
