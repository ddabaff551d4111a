//! Linearized tensor storage and the fix_8 numeric format.
//!
//! Every tensor in the simulator is a logical `(C, H, W)` cube flattened into
//! one contiguous buffer, W fastest, then H, then C. Matrices are stored as
//! `(1, K, N)` cubes and vectors as `(1, 1, N)`.

use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("coordinate {index} out of range on axis {axis} (extent {extent})")]
    OutOfBounds { axis: Axis, index: usize, extent: usize },
    #[error("invalid dimensions ({c}, {h}, {w}): every extent must be at least 1")]
    EmptyDims { c: usize, h: usize, w: usize },
    #[error("buffer holds {actual} elements but dims require {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("fraction bits {0} outside 0..=7")]
    BadFracBits(u8),
    #[error("cannot quantize NaN")]
    NotANumber,
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("tensor `{name}`: {source}")]
    Tensor {
        name: String,
        #[source]
        source: TensorError,
    },
    #[error("tensor `{0}` not present in manifest")]
    Missing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    C,
    H,
    W,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::C => "C",
            Axis::H => "H",
            Axis::W => "W",
        })
    }
}

/// Extents of a `(C, H, W)` cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub fn new(c: usize, h: usize, w: usize) -> Result<Self, TensorError> {
        if c == 0 || h == 0 || w == 0 {
            return Err(TensorError::EmptyDims { c, h, w });
        }
        Ok(Self { c, h, w })
    }

    pub fn matrix(rows: usize, cols: usize) -> Result<Self, TensorError> {
        Self::new(1, rows, cols)
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of `(c, h, w)` in the flattened buffer.
    pub fn linear_index(&self, c: usize, h: usize, w: usize) -> Result<usize, TensorError> {
        for (axis, index, extent) in [(Axis::C, c, self.c), (Axis::H, h, self.h), (Axis::W, w, self.w)] {
            if index >= extent {
                return Err(TensorError::OutOfBounds { axis, index, extent });
            }
        }
        Ok(c * self.h * self.w + h * self.w + w)
    }
}

/// Free-function form of [`Dims3::linear_index`].
pub fn linear_index(c: usize, h: usize, w: usize, dims: Dims3) -> Result<usize, TensorError> {
    dims.linear_index(c, h, w)
}

/// Signed 8-bit fixed point with `frac_bits` fractional bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QuantSpec {
    frac_bits: u8,
}

/// Raw fix_8 value. Its meaning depends on the [`QuantSpec`] it travels with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Fix8(pub i8);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantized {
    pub value: Fix8,
    pub saturated: bool,
}

impl QuantSpec {
    pub const TOTAL_BITS: u8 = 8;

    pub fn new(frac_bits: u8) -> Result<Self, TensorError> {
        if frac_bits > 7 {
            return Err(TensorError::BadFracBits(frac_bits));
        }
        Ok(Self { frac_bits })
    }

    pub fn frac_bits(&self) -> u8 {
        self.frac_bits
    }

    pub fn signed(&self) -> bool {
        true
    }

    pub fn scale(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn min_value(&self) -> f64 {
        i8::MIN as f64 * self.scale()
    }

    pub fn max_value(&self) -> f64 {
        i8::MAX as f64 * self.scale()
    }

    /// Round-to-nearest-even onto the grid, saturating at the int8 range.
    /// Infinities saturate and set the flag.
    pub fn quantize(&self, x: f64) -> Result<Quantized, TensorError> {
        if x.is_nan() {
            return Err(TensorError::NotANumber);
        }
        let scaled = (x * (self.frac_bits as f64).exp2()).round_ties_even();
        let (raw, saturated) = saturate_i8_f64(scaled);
        Ok(Quantized {
            value: Fix8(raw),
            saturated,
        })
    }

    pub fn dequantize(&self, v: Fix8) -> f64 {
        v.0 as f64 * self.scale()
    }
}

pub fn quantize(x: f64, spec: QuantSpec) -> Result<Quantized, TensorError> {
    spec.quantize(x)
}

pub fn dequantize(v: Fix8, spec: QuantSpec) -> f64 {
    spec.dequantize(v)
}

fn saturate_i8_f64(v: f64) -> (i8, bool) {
    if v > i8::MAX as f64 {
        (i8::MAX, true)
    } else if v < i8::MIN as f64 {
        (i8::MIN, true)
    } else {
        (v as i8, false)
    }
}

/// Clamp a wide integer into int8, reporting whether clamping happened.
pub fn saturate_i8(v: i64) -> (i8, bool) {
    if v > i8::MAX as i64 {
        (i8::MAX, true)
    } else if v < i8::MIN as i64 {
        (i8::MIN, true)
    } else {
        (v as i8, false)
    }
}

/// Multiply `v` by `2^-shift` with round-half-to-even. Negative shifts scale up.
pub fn shift_round_even(v: i64, shift: i32) -> i64 {
    if shift <= 0 {
        return v << (-shift) as u32;
    }
    let shift = shift as u32;
    if shift >= 63 {
        return 0;
    }
    let floor = v >> shift;
    let rem = v - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Float(Vec<f64>),
    Fix8 { raw: Vec<i8>, quant: QuantSpec },
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Float(v) => v.len(),
            TensorData::Fix8 { raw, .. } => raw.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3D {
    dims: Dims3,
    data: TensorData,
}

impl Tensor3D {
    pub fn new(dims: Dims3, data: TensorData) -> Result<Self, TensorError> {
        if data.len() != dims.len() {
            return Err(TensorError::LengthMismatch {
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Dims3, values: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::Float(values))
    }

    pub fn from_raw(dims: Dims3, raw: Vec<i8>, quant: QuantSpec) -> Result<Self, TensorError> {
        Self::new(dims, TensorData::Fix8 { raw, quant })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn quant(&self) -> Option<QuantSpec> {
        match &self.data {
            TensorData::Float(_) => None,
            TensorData::Fix8 { quant, .. } => Some(*quant),
        }
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> Result<f64, TensorError> {
        let i = self.dims.linear_index(c, h, w)?;
        Ok(match &self.data {
            TensorData::Float(v) => v[i],
            TensorData::Fix8 { raw, quant } => quant.dequantize(Fix8(raw[i])),
        })
    }

    /// Values as reals; exact for fix_8 data.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::Float(v) => v.clone(),
            TensorData::Fix8 { raw, quant } => raw.iter().map(|&r| quant.dequantize(Fix8(r))).collect(),
        }
    }

    /// Quantize to fix_8. Returns the tensor and the number of saturated elements.
    pub fn to_fix8(&self, quant: QuantSpec) -> Result<(Tensor3D, usize), TensorError> {
        let mut saturations = 0;
        let raw = match &self.data {
            TensorData::Fix8 { raw, quant: q } if *q == quant => raw.clone(),
            _ => self
                .to_f64()
                .into_iter()
                .map(|x| {
                    let q = quant.quantize(x)?;
                    saturations += q.saturated as usize;
                    Ok(q.value.0)
                })
                .collect::<Result<Vec<_>, TensorError>>()?,
        };
        Ok((Tensor3D::from_raw(self.dims, raw, quant)?, saturations))
    }

    /// Little-endian payload: raw signed bytes for fix_8, `f32` for float data.
    pub fn to_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::Float(v) => v.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect(),
            TensorData::Fix8 { raw, .. } => raw.iter().map(|&r| r as u8).collect(),
        }
    }

    pub fn from_bytes(dims: Dims3, quant: Option<QuantSpec>, bytes: &[u8]) -> Result<Self, TensorError> {
        match quant {
            Some(q) => {
                if bytes.len() != dims.len() {
                    return Err(TensorError::LengthMismatch {
                        expected: dims.len(),
                        actual: bytes.len(),
                    });
                }
                Self::from_raw(dims, bytes.iter().map(|&b| b as i8).collect(), q)
            }
            None => {
                if bytes.len() != dims.len() * 4 {
                    return Err(TensorError::LengthMismatch {
                        expected: dims.len(),
                        actual: bytes.len() / 4,
                    });
                }
                let values = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                    .collect();
                Self::from_f64(dims, values)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    /// `(1, K, N)` matrix, input features by output features.
    Linear,
    Bias,
    NormWeight,
    NormBias,
    /// `(1, (2w-1)^2, heads)` relative position bias table.
    RelPosBias,
    Input,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub role: TensorRole,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    /// Present iff the tensor is stored as fix_8 raw bytes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frac_bits: Option<u8>,
    pub file: String,
    #[serde(default)]
    pub byte_offset: u64,
}

impl ManifestEntry {
    pub fn dims(&self) -> Result<Dims3, TensorError> {
        Dims3::new(self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn quant(&self) -> Result<Option<QuantSpec>, TensorError> {
        self.frac_bits.map(QuantSpec::new).transpose()
    }

    pub fn byte_len(&self) -> usize {
        if self.frac_bits.is_some() {
            self.len()
        } else {
            self.len() * 4
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(ManifestEntry::len).sum()
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|source| io_err(path, source))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Read one manifest tensor from `dir`.
pub fn read_tensor(dir: &Path, entry: &ManifestEntry) -> Result<Tensor3D, IoError> {
    let wrap = |source| IoError::Tensor {
        name: entry.name.clone(),
        source,
    };
    let path = dir.join(&entry.file);
    let mut f = fs::File::open(&path).map_err(|e| io_err(&path, e))?;
    f.seek(SeekFrom::Start(entry.byte_offset))
        .map_err(|e| io_err(&path, e))?;
    let mut buf = vec![0u8; entry.byte_len()];
    f.read_exact(&mut buf).map_err(|e| io_err(&path, e))?;
    Tensor3D::from_bytes(entry.dims().map_err(wrap)?, entry.quant().map_err(wrap)?, &buf).map_err(wrap)
}

pub fn write_tensor(path: &Path, tensor: &Tensor3D) -> Result<(), IoError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&tensor.to_bytes()).map_err(|e| io_err(path, e))
}

/// Write every tensor into `dir`, one file each, plus `manifest.json`.
pub fn write_weight_dir(dir: &Path, tensors: &[(ManifestEntry, Tensor3D)]) -> Result<Manifest, IoError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut manifest = Manifest::default();
    for (entry, tensor) in tensors {
        let mut entry = entry.clone();
        entry.frac_bits = tensor.quant().map(|q| q.frac_bits());
        entry.byte_offset = 0;
        write_tensor(&dir.join(&entry.file), tensor)?;
        manifest.tensors.push(entry);
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
