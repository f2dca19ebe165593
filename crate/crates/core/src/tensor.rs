//! Named numeric arrays and their binary layout.
//!
//! Layout of an encoded [`Weights`] value:
//!
//! ```text
//! u32 BE   tensor count
//! per tensor:
//!   u16 BE   name length, then UTF-8 name bytes
//!   u8       dtype tag (0 = F32, 1 = F64)
//!   u8       rank
//!   u32 BE   each extent
//!   raw element bytes, little-endian, row-major
//! ```

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

use crate::codec::{put_u16, put_u32, put_u8, CodecError, Reader};

pub const MAX_NAME_LEN: usize = u16::MAX as usize;
pub const MAX_RANK: usize = u8::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

/// Flat row-major element buffer.
///
/// Equality is bitwise: NaN payloads must match and `0.0 != -0.0`.
#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("tensor `{name}`: shape {shape:?} holds {expected} elements but data has {actual}")]
    ElementCount {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{name}`: zero extent in shape {shape:?}")]
    ZeroExtent { name: String, shape: Vec<usize> },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: TensorData,
    ) -> Result<Self, TensorError> {
        let name = name.into();
        if shape.contains(&0) {
            return Err(TensorError::ZeroExtent { name, shape });
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::ElementCount {
                name,
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { name, shape, data })
    }

    pub fn from_f32(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        Self::new(name, shape, TensorData::F32(data))
    }

    pub fn from_f64(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        Self::new(name, shape, TensorData::F64(data))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>, dtype: DType) -> Self {
        let n = shape.iter().product::<usize>();
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![0.0; n]),
            DType::F64 => TensorData::F64(vec![0.0; n]),
        };
        Self::new(name, shape, data).expect("zeros: shape must have nonzero extents")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same name, dtype and shape.
    pub fn same_layout(&self, other: &Tensor) -> bool {
        self.name == other.name && self.dtype() == other.dtype() && self.shape == other.shape
    }

    fn encoded_len(&self) -> usize {
        2 + self.name.len() + 1 + 1 + 4 * self.shape.len() + self.len() * self.dtype().size_of()
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    tensors: Vec<Tensor>,
}

impl Weights {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self, TensorError> {
        let mut seen = HashSet::with_capacity(tensors.len());
        for t in &tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(TensorError::DuplicateName(t.name.clone()));
            }
        }
        Ok(Self { tensors })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Tensor-by-tensor layout equality (names, dtypes, shapes, order).
    pub fn same_layout(&self, other: &Weights) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.same_layout(b))
    }

    /// All elements concatenated in tensor order, widened to f64.
    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_elements());
        for t in &self.tensors {
            match &t.data {
                TensorData::F32(v) => out.extend(v.iter().map(|&x| x as f64)),
                TensorData::F64(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    /// New weights with this layout and values taken from `flat`, each tensor
    /// narrowed back to its own dtype.
    ///
    /// Panics if `flat.len() != self.num_elements()`.
    pub fn with_flat_values(&self, flat: &[f64]) -> Weights {
        assert_eq!(flat.len(), self.num_elements(), "flat length mismatch");
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let chunk = &flat[offset..offset + t.len()];
                offset += t.len();
                let data = match t.dtype() {
                    DType::F32 => TensorData::F32(chunk.iter().map(|&x| x as f32).collect()),
                    DType::F64 => TensorData::F64(chunk.to_vec()),
                };
                Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data,
                }
            })
            .collect();
        Weights { tensors }
    }
}

/// Encoded length of `w`, computed without encoding.
pub fn weights_byte_size(w: &Weights) -> usize {
    4 + w.tensors.iter().map(Tensor::encoded_len).sum::<usize>()
}

pub fn encode_weights(w: &Weights) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::with_capacity(weights_byte_size(w));
    encode_weights_into(w, &mut out)?;
    Ok(out)
}

pub(crate) fn encode_weights_into(w: &Weights, out: &mut Vec<u8>) -> Result<(), CodecError> {
    let count = u32::try_from(w.tensors.len()).map_err(|_| CodecError::TooMany {
        what: "tensor",
        count: w.tensors.len(),
        limit: u32::MAX as usize,
    })?;
    put_u32(out, count);
    for t in &w.tensors {
        if t.name.len() > MAX_NAME_LEN {
            return Err(CodecError::NameTooLong { len: t.name.len() });
        }
        if t.shape.len() > MAX_RANK {
            return Err(CodecError::RankTooLarge {
                name: t.name.clone(),
                rank: t.shape.len(),
            });
        }
        put_u16(out, t.name.len() as u16);
        out.extend_from_slice(t.name.as_bytes());
        put_u8(out, t.dtype().tag());
        put_u8(out, t.shape.len() as u8);
        for &extent in &t.shape {
            let e = u32::try_from(extent).map_err(|_| CodecError::ExtentTooLarge {
                name: t.name.clone(),
                extent,
            })?;
            put_u32(out, e);
        }
        match &t.data {
            TensorData::F32(v) => {
                out.reserve(v.len() * 4);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            TensorData::F64(v) => {
                out.reserve(v.len() * 8);
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(())
}

/// Decodes a buffer holding exactly one encoded [`Weights`] value.
pub fn decode_weights(bytes: &[u8]) -> Result<Weights, CodecError> {
    let mut r = Reader::new(bytes);
    let w = read_weights(&mut r)?;
    r.finish()?;
    Ok(w)
}

pub(crate) fn read_weights(r: &mut Reader<'_>) -> Result<Weights, CodecError> {
    let count = r.u32()? as usize;
    // Each tensor needs at least 4 bytes of header, so cap the preallocation.
    let mut tensors = Vec::with_capacity(count.min(r.remaining() / 4));
    let mut seen: HashSet<String> = HashSet::new();
    for _ in 0..count {
        let name_at = r.offset();
        let name = r.string()?;
        if seen.contains(&name) {
            return Err(CodecError::DuplicateName {
                name,
                offset: name_at,
            });
        }
        let tag_at = r.offset();
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or(CodecError::UnknownDType {
            tag,
            offset: tag_at,
        })?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let shape_at = r.offset();
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape.contains(&0) {
            return Err(CodecError::InvalidShape {
                offset: shape_at,
                reason: format!("zero extent in {shape:?}"),
            });
        }
        let elements = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(dtype.size_of()).map(|b| (n, b)));
        let (n, nbytes) = elements.ok_or_else(|| CodecError::InvalidShape {
            offset: shape_at,
            reason: format!("element count of {shape:?} overflows"),
        })?;
        let raw = r.take(nbytes)?;
        let data = match dtype {
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect(),
            ),
        };
        debug_assert_eq!(data.len(), n);
        seen.insert(name.clone());
        tensors.push(Tensor { name, shape, data });
    }
    Ok(Weights { tensors })
}
