//! Checkpoints as named tensor maps, stored in the safetensors container
//! layout: an 8-byte little-endian header length, a UTF-8 JSON header, then
//! the concatenated little-endian tensor buffers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use glob::Pattern;
use nalgebra::DMatrix;
use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }
}

/// A dense row-major tensor. Values keep their stored precision; all
/// arithmetic goes through [`DenseTensor::to_f64`].
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!("shape {shape:?} must have positive dims")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: Vec<usize>, dtype: Dtype, values: Vec<f64>) -> Result<Self> {
        let data = match dtype {
            Dtype::F64 => TensorData::F64(values),
            Dtype::F32 => TensorData::F32(values.into_iter().map(|v| v as f32).collect()),
        };
        Self::new(shape, data)
    }

    pub fn from_matrix(m: &DMatrix<f64>, dtype: Dtype) -> Self {
        let (rows, cols) = m.shape();
        let values: Vec<f64> = m.transpose().as_slice().to_vec();
        Self::from_f64(vec![rows, cols], dtype, values).expect("matrix dims are positive")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Row-major 2-D view as a matrix; `None` for any other rank.
    pub fn to_matrix(&self) -> Option<DMatrix<f64>> {
        match self.shape[..] {
            [rows, cols] => Some(DMatrix::from_row_slice(rows, cols, &self.to_f64())),
            _ => None,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// One checkpoint: tensors keyed (and iterated) by name, plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    pub entries: BTreeMap<String, DenseTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseTensor) -> Option<DenseTensor> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest elementwise absolute difference over shared tensors; `None`
    /// when name sets or shapes differ.
    pub fn max_abs_diff(&self, other: &TensorMap) -> Option<f64> {
        if self.entries.len() != other.entries.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (name, a) in &self.entries {
            let b = other.entries.get(name)?;
            if a.shape() != b.shape() {
                return None;
            }
            for (x, y) in a.to_f64().iter().zip(b.to_f64()) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }
}

/// Whether a parameter takes the low-rank path or is merged by averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ParamClass {
    Matrix,
    NonMatrix,
}

/// Shape-only classification: 2-D with both dims at least 2 is a matrix.
pub fn classify(tensor: &DenseTensor) -> ParamClass {
    match tensor.shape() {
        [m, n] if *m >= 2 && *n >= 2 => ParamClass::Matrix,
        _ => ParamClass::NonMatrix,
    }
}

/// [`classify`] with per-name glob overrides. Excludes win over includes,
/// and includes only ever promote 2-D tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamClassifier {
    include: Vec<Pattern>,
    exclude: Vec<Pattern>,
}

impl ParamClassifier {
    pub fn with_patterns<S: AsRef<str>>(include: &[S], exclude: &[S]) -> Result<Self> {
        let compile = |pats: &[S]| -> Result<Vec<Pattern>> {
            pats.iter()
                .map(|p| {
                    Pattern::new(p.as_ref())
                        .map_err(|e| Error::Param(format!("bad glob `{}`: {e}", p.as_ref())))
                })
                .collect()
        };
        Ok(Self { include: compile(include)?, exclude: compile(exclude)? })
    }

    pub fn classify(&self, name: &str, tensor: &DenseTensor) -> ParamClass {
        if self.exclude.iter().any(|p| p.matches(name)) {
            return ParamClass::NonMatrix;
        }
        if tensor.shape().len() == 2 && self.include.iter().any(|p| p.matches(name)) {
            return ParamClass::Matrix;
        }
        classify(tensor)
    }
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TensorMap> {
    if bytes.len() < 8 {
        return Err(Error::Truncation(format!("{} bytes, need 8-byte header length", bytes.len())));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let body = &bytes[8..];
    if header_len > body.len() as u64 {
        return Err(Error::Truncation(format!(
            "header declares {header_len} bytes, only {} available",
            body.len()
        )));
    }
    let (header, buffer) = body.split_at(header_len as usize);
    let header = std::str::from_utf8(header)
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: Map<String, Value> =
        serde_json::from_str(header).map_err(|e| Error::Format(format!("header JSON: {e}")))?;

    let mut map = TensorMap::new();
    for (name, value) in header {
        if name == METADATA_KEY {
            map.metadata = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("metadata must map strings to strings: {e}")))?;
            continue;
        }
        let entry: HeaderEntry = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        let dtype = match entry.dtype.as_str() {
            "F32" => Dtype::F32,
            "F64" => Dtype::F64,
            _ => return Err(Error::UnsupportedDtype { name, dtype: entry.dtype }),
        };
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(Error::Format(format!("tensor `{name}` has shape {:?}", entry.shape)));
        }
        let [start, end] = entry.data_offsets;
        if start > end {
            return Err(Error::Format(format!("tensor `{name}` has offsets {start}>{end}")));
        }
        if end > buffer.len() as u64 {
            return Err(Error::Truncation(format!(
                "tensor `{name}` ends at {end}, buffer has {} bytes",
                buffer.len()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let raw = &buffer[start as usize..end as usize];
        if raw.len() != numel * dtype.size() {
            return Err(Error::Format(format!(
                "tensor `{name}` spans {} bytes, shape {:?} needs {}",
                raw.len(),
                entry.shape,
                numel * dtype.size()
            )));
        }
        let data = match dtype {
            Dtype::F32 => TensorData::F32(
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            Dtype::F64 => TensorData::F64(
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        map.insert(name, DenseTensor::new(entry.shape, data)?);
    }
    Ok(map)
}

pub fn encode_checkpoint(map: &TensorMap) -> Vec<u8> {
    let mut header = Map::new();
    if !map.metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(map.metadata));
    }
    let mut buffer = Vec::new();
    for (name, tensor) in &map.entries {
        let start = buffer.len();
        tensor.write_le(&mut buffer);
        header.insert(
            name.clone(),
            json!({
                "dtype": tensor.dtype().as_str(),
                "shape": tensor.shape(),
                "data_offsets": [start, buffer.len()],
            }),
        );
    }
    let mut header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
    // Pad so the tensor buffer starts 8-byte aligned.
    while header.len() % 8 != 0 {
        header.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header.len() + buffer.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&buffer);
    out
}

pub fn save_checkpoint(map: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(map)).map_err(|e| Error::io(path, e))
}

/// Checks that all maps share names, shapes and dtypes. Reports the
/// lexicographically first offending tensor, so the outcome does not depend
/// on the order of `maps`.
pub fn validate_aligned(maps: &[&TensorMap]) -> Result<()> {
    if maps.len() < 2 {
        return Err(Error::Precondition(format!(
            "alignment check needs at least 2 checkpoints, got {}",
            maps.len()
        )));
    }
    let names: BTreeSet<&str> = maps.iter().flat_map(|m| m.names()).collect();
    for name in names {
        let mut seen: Option<(&[usize], Dtype)> = None;
        for m in maps {
            let Some(t) = m.get(name) else {
                return Err(Error::ArchitectureMismatch(name.to_string()));
            };
            match seen {
                None => seen = Some((t.shape(), t.dtype())),
                Some((shape, dtype)) if shape == t.shape() && dtype == t.dtype() => {}
                Some(_) => return Err(Error::ArchitectureMismatch(name.to_string())),
            }
        }
    }
    Ok(())
}
