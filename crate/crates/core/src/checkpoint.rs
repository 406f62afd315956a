//! `TDLM` checkpoint container.
//!
//! ```text
//! offset 0   b"TDLM"
//!        4   u32 LE  format version (1)
//!        8   u32 LE  header length H
//!       12   H bytes JSON header {"model": ModelConfig, "tensors": [entry...]}
//!     12+H   payloads, little-endian, in manifest order
//! ```
//!
//! Each manifest entry is `{name, dtype, shape, offset, length}` (plus
//! `group_size` for quantized weights). `offset` counts from the start of the
//! payload section; entries are contiguous and ascending. Dtypes:
//! `f64`, `f32`, `u4` (two codes per byte, element `2k` in the low nibble of
//! byte `k`, row-major) and `u8`.
//!
//! A quantized linear layer `L` is stored as `L` (codes, output-major
//! `[out × in]`), `L.scale` (`f32`, `[out × groups]`) and `L.zero`
//! (same code dtype as `L`, `[out × groups]`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, Transformer};
use crate::numerics::Tensor;
use crate::quant::{packed_len, unpack_nibbles, QuantizedLinear, QuantizedModel};

pub const MAGIC: &[u8; 4] = b"TDLM";
pub const VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
    U4,
    U8,
}

impl DType {
    pub fn payload_len(self, numel: usize) -> usize {
        match self {
            DType::F64 => 8 * numel,
            DType::F32 => 4 * numel,
            DType::U4 => packed_len(numel, 4),
            DType::U8 => numel,
        }
    }

    fn code_bits(self) -> Option<u8> {
        match self {
            DType::U4 => Some(4),
            DType::U8 => Some(8),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

/// Payload of one stored tensor. Code payloads hold packed bytes.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U4(Vec<u8>),
    U8(Vec<u8>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F64(_) => DType::F64,
            Payload::F32(_) => DType::F32,
            Payload::U4(_) => DType::U4,
            Payload::U8(_) => DType::U8,
        }
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        match self {
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U4(b) | Payload::U8(b) => out.extend_from_slice(b),
        }
    }

    fn read(dtype: DType, bytes: &[u8]) -> Payload {
        match dtype {
            DType::F64 => Payload::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::F32 => Payload::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::U4 => Payload::U4(bytes.to_vec()),
            DType::U8 => Payload::U8(bytes.to_vec()),
        }
    }

    fn as_floats(&self) -> Option<Vec<f64>> {
        match self {
            Payload::F64(v) => Some(v.clone()),
            Payload::F32(v) => Some(v.iter().map(|&x| f64::from(x)).collect()),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
    pub group_size: Option<usize>,
}

impl StoredTensor {
    fn floats(name: &str, t: &Tensor, dtype: DType) -> Self {
        let payload = match dtype {
            DType::F32 => Payload::F32(t.data().iter().map(|&x| x as f32).collect()),
            _ => Payload::F64(t.data().to_vec()),
        };
        StoredTensor {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            payload,
            group_size: None,
        }
    }
}

/// In-memory image of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub tensors: Vec<StoredTensor>,
}

impl Checkpoint {
    /// Full-precision checkpoint; `dtype` must be `F64` or `F32`.
    pub fn from_model(model: &Transformer, dtype: DType) -> Result<Self> {
        if dtype.code_bits().is_some() {
            return Err(Error::Contract(format!("{dtype:?} needs a quantized model")));
        }
        let mut tensors = Vec::new();
        model
            .params
            .for_each(|name, t| tensors.push(StoredTensor::floats(name, t, dtype)));
        Ok(Checkpoint {
            model: model.config.clone(),
            tensors,
        })
    }

    /// Linear weights as codes + sidecars, everything else as `f64`.
    pub fn from_quantized(qm: &QuantizedModel) -> Self {
        let mut tensors = Vec::new();
        qm.model
            .params
            .for_each(|name, t| match qm.layers.iter().find(|(n, _)| n == name) {
                Some((_, q)) => tensors.extend(quantized_entries(name, q)),
                None => tensors.push(StoredTensor::floats(name, t, DType::F64)),
            });
        Checkpoint {
            model: qm.model.config.clone(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut manifest = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let offset = payload.len();
            t.payload.write_to(&mut payload);
            manifest.push(ManifestEntry {
                name: t.name.clone(),
                dtype: t.payload.dtype(),
                shape: t.shape.clone(),
                offset,
                length: payload.len() - offset,
                group_size: t.group_size,
            });
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            tensors: manifest,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses and validates a checkpoint image; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < PREFIX_LEN {
            return Err(fail(format!(
                "truncated: expected at least {PREFIX_LEN} bytes, found {}",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(fail(format!("bad magic {:?}, expected \"TDLM\"", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fail(format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let payload_start = PREFIX_LEN + hlen;
        if bytes.len() < payload_start {
            return Err(fail(format!(
                "truncated: expected at least {payload_start} bytes, found {}",
                bytes.len()
            )));
        }
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])
            .map_err(|e| fail(format!("invalid header: {e}")))?;
        header.model.validate()?;
        let mut next = 0;
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            let want = e.dtype.payload_len(numel);
            if e.length != want {
                return Err(fail(format!(
                    "tensor {} declares {} bytes but shape {:?} as {:?} needs {want}",
                    e.name, e.length, e.shape, e.dtype
                )));
            }
            if e.offset != next {
                return Err(fail(format!(
                    "tensor {} at offset {} but previous tensor ends at {next}",
                    e.name, e.offset
                )));
            }
            next += e.length;
        }
        let expected = payload_start + next;
        if bytes.len() != expected {
            let kind = if bytes.len() < expected {
                "truncated"
            } else {
                "trailing data"
            };
            return Err(fail(format!(
                "{kind}: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let start = payload_start + e.offset;
                StoredTensor {
                    payload: Payload::read(e.dtype, &bytes[start..start + e.length]),
                    name: e.name,
                    shape: e.shape,
                    group_size: e.group_size,
                }
            })
            .collect();
        Ok(Checkpoint {
            model: header.model,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Quantized layer stored under `name`, if it is a code tensor.
    pub fn quantized_layer(&self, name: &str) -> Result<Option<QuantizedLinear>> {
        let Some(t) = self.get(name) else {
            return Ok(None);
        };
        let Some(bits) = t.payload.dtype().code_bits() else {
            return Ok(None);
        };
        if t.group_size.is_none() && name.ends_with(".zero") {
            // zero-point sidecar, not a layer
            return Ok(None);
        }
        let missing = |what: &str| Error::Contract(format!("quantized tensor {name} lacks {what}"));
        let [rows, cols] = t.shape[..] else {
            return Err(Error::Contract(format!("quantized tensor {name} must be 2-D")));
        };
        let group = t.group_size.ok_or_else(|| missing("group_size"))?;
        let scale = self.get(&format!("{name}.scale")).ok_or_else(|| missing("scales"))?;
        let zero = self
            .get(&format!("{name}.zero"))
            .ok_or_else(|| missing("zero-points"))?;
        let scales = scale.payload.as_floats().ok_or_else(|| missing("float scales"))?;
        let n_groups = zero.shape.iter().product();
        let zeros = decode_codes(&zero.payload, n_groups).ok_or_else(|| missing("code zero-points"))?;
        let codes = decode_codes(&t.payload, rows * cols).expect("code dtype");
        QuantizedLinear::from_parts(rows, cols, bits, group, &codes, scales, zeros).map(Some)
    }

    pub fn quantized_layers(&self) -> Result<Vec<(String, QuantizedLinear)>> {
        let mut out = Vec::new();
        for t in &self.tensors {
            if let Some(q) = self.quantized_layer(&t.name)? {
                out.push((t.name.clone(), q));
            }
        }
        Ok(out)
    }

    /// Rebuilds the model, dequantizing code tensors.
    pub fn to_model(&self) -> Result<Transformer> {
        let shapes = param_shapes(&self.model);
        let params = shapes.try_map(|name, shape| -> Result<Tensor> {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Contract(format!("checkpoint is missing tensor {name}")))?;
            if let Some(q) = self.quantized_layer(name)? {
                let w = q.dequantize().transpose();
                if w.shape() != shape.as_slice() {
                    return Err(shape_error(name, shape, w.shape()));
                }
                return Ok(w);
            }
            let data = t
                .payload
                .as_floats()
                .ok_or_else(|| Error::Contract(format!("tensor {name} has no float payload")))?;
            if t.shape != *shape {
                return Err(shape_error(name, shape, &t.shape));
            }
            Tensor::new(shape, data)
        })?;
        Transformer::from_params(self.model.clone(), params)
    }
}

fn shape_error(name: &str, want: &[usize], got: &[usize]) -> Error {
    Error::Contract(format!("tensor {name} has shape {got:?}, expected {want:?}"))
}

fn decode_codes(p: &Payload, n: usize) -> Option<Vec<u8>> {
    match p {
        Payload::U4(b) => Some(unpack_nibbles(b, n)),
        Payload::U8(b) => Some(b[..n].to_vec()),
        _ => None,
    }
}

fn quantized_entries(name: &str, q: &QuantizedLinear) -> [StoredTensor; 3] {
    let (rows, _) = q.shape();
    let groups = q.groups_per_row();
    let (codes, zeros) = if q.bits() <= 4 {
        (
            Payload::U4(q.packed_codes().to_vec()),
            Payload::U4(crate::quant::pack_nibbles(q.zeros())),
        )
    } else {
        (Payload::U8(q.packed_codes().to_vec()), Payload::U8(q.zeros().to_vec()))
    };
    let (r, c) = q.shape();
    [
        StoredTensor {
            name: name.to_string(),
            shape: vec![r, c],
            payload: codes,
            group_size: Some(q.group_size()),
        },
        StoredTensor {
            name: format!("{name}.scale"),
            shape: vec![rows, groups],
            payload: Payload::F32(q.scales().iter().map(|&s| s as f32).collect()),
            group_size: None,
        },
        StoredTensor {
            name: format!("{name}.zero"),
            shape: vec![rows, groups],
            payload: zeros,
            group_size: None,
        },
    ]
}

/// Saves all parameters in full `f64` precision.
pub fn save_model(model: &Transformer, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_model(model, DType::F64)?.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Transformer> {
    Checkpoint::load(path)?.to_model()
}

pub fn save_quantized(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_quantized(qm).save(path)
}
