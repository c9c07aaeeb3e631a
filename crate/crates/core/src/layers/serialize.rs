//! Weight container: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header describing every layer, then all parameter scalars in
//! little-endian order at the header's precision.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Precision, Real, Tensor};

use super::{AvgPool, ConvPath, KernelWeights, Layer, OrthoConv, PlainConv, Dense};

pub const MAGIC: &[u8; 8] = b"ORTHODE1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerHeader {
    PlainConv {
        spatial_dims: (usize, usize),
        path: ConvPath,
        shapes: Vec<Vec<usize>>,
    },
    OrthoConv {
        spatial_dims: (usize, usize),
        shapes: Vec<Vec<usize>>,
    },
    Dense {
        shapes: Vec<Vec<usize>>,
    },
    Relu,
    #[serde(rename = "groupsort")]
    GroupSort,
    AvgPool {
        factor: usize,
    },
}

impl LayerHeader {
    fn shapes(&self) -> &[Vec<usize>] {
        match self {
            LayerHeader::PlainConv { shapes, .. } | LayerHeader::OrthoConv { shapes, .. } | LayerHeader::Dense { shapes } => {
                shapes
            }
            _ => &[],
        }
    }
}

/// One named group of layers (e.g. the blocks of a model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionHeader {
    pub name: String,
    pub layers: Vec<LayerHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub precision: Precision,
    pub sections: Vec<SectionHeader>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn describe<T: Real>(layer: &Layer<T>) -> LayerHeader {
    let shapes = || layer.params().iter().map(|p| p.shape().to_vec()).collect();
    match layer {
        Layer::PlainConv(c) => LayerHeader::PlainConv {
            spatial_dims: c.spatial_dims(),
            path: c.path(),
            shapes: shapes(),
        },
        Layer::OrthoConv(c) => LayerHeader::OrthoConv {
            spatial_dims: c.operator().spatial_dims(),
            shapes: shapes(),
        },
        Layer::Dense(_) => LayerHeader::Dense { shapes: shapes() },
        Layer::Relu => LayerHeader::Relu,
        Layer::GroupSort => LayerHeader::GroupSort,
        Layer::AvgPool(p) => LayerHeader::AvgPool { factor: p.factor },
    }
}

fn build<T: Real>(header: &LayerHeader, mut params: Vec<Tensor<T>>) -> Result<Layer<T>> {
    let bad = |what: &str| Error::Checkpoint(format!("{what} layer has an unexpected parameter count"));
    Ok(match header {
        LayerHeader::PlainConv { spatial_dims, path, .. } => {
            let bias = match params.len() {
                1 => None,
                2 => params.pop(),
                _ => return Err(bad("plain_conv")),
            };
            let w = params.pop().ok_or_else(|| bad("plain_conv"))?;
            Layer::PlainConv(PlainConv::with_path(KernelWeights::new(w)?, bias, *spatial_dims, *path)?)
        }
        LayerHeader::OrthoConv { spatial_dims, .. } => {
            let w = params.pop().filter(|_| params.is_empty()).ok_or_else(|| bad("ortho_conv"))?;
            Layer::OrthoConv(OrthoConv::new(KernelWeights::new(w)?, *spatial_dims)?)
        }
        LayerHeader::Dense { .. } => {
            if params.len() != 2 {
                return Err(bad("dense"));
            }
            let b = params.pop().unwrap();
            let w = params.pop().unwrap();
            Layer::Dense(Dense::new(w, b)?)
        }
        LayerHeader::Relu => Layer::Relu,
        LayerHeader::GroupSort => Layer::GroupSort,
        LayerHeader::AvgPool { factor } => Layer::AvgPool(AvgPool::new(*factor)?),
    })
}

/// Encodes named layer groups into a byte buffer.
pub fn encode<T: Real>(sections: &[(&str, &[Layer<T>])], meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = ContainerHeader {
        precision: T::PRECISION,
        sections: sections
            .iter()
            .map(|(name, layers)| SectionHeader {
                name: name.to_string(),
                layers: layers.iter().map(describe).collect(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, layers) in sections {
        for layer in layers.iter() {
            for p in layer.params() {
                for &v in p.data() {
                    match T::PRECISION {
                        Precision::F32 => out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes()),
                        Precision::F64 => out.extend_from_slice(&v.to_f64().to_le_bytes()),
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Layer groups in file order, plus the header.
pub type Decoded<T> = (Vec<(String, Vec<Layer<T>>)>, ContainerHeader);

/// Decodes a buffer produced by [`encode`], converting scalars to `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Decoded<T>> {
    let truncated = || Error::Checkpoint("container is truncated".into());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing container magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(truncated)?;
    let header: ContainerHeader = serde_json::from_slice(json)?;
    let width = match header.precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut cursor = 16 + len;
    let mut sections = Vec::with_capacity(header.sections.len());
    for section in &header.sections {
        let mut layers = Vec::with_capacity(section.layers.len());
        for lh in &section.layers {
            let mut params = Vec::new();
            for shape in lh.shapes() {
                let n: usize = shape.iter().product();
                let raw = bytes.get(cursor..cursor + n * width).ok_or_else(truncated)?;
                cursor += n * width;
                let data = raw
                    .chunks_exact(width)
                    .map(|c| match header.precision {
                        Precision::F32 => T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                        Precision::F64 => T::lit(f64::from_le_bytes(c.try_into().unwrap())),
                    })
                    .collect();
                params.push(Tensor::new(shape.clone(), data)?);
            }
            layers.push(build(lh, params)?);
        }
        sections.push((section.name.clone(), layers));
    }
    if cursor != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after payload", bytes.len() - cursor)));
    }
    Ok((sections, header))
}

pub fn save<T: Real>(path: &Path, sections: &[(&str, &[Layer<T>])], meta: serde_json::Value) -> Result<()> {
    let bytes = encode(sections, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Decoded<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
