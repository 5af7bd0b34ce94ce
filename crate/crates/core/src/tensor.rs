//! Tensor headers, shapes, data types and tensor bundles.
//!
//! A [`Tensor`] is only a header: metadata plus a [`Region`] locating its
//! bytes inside a [`MemoryPool`](crate::memory::MemoryPool) arena. Shapes are
//! row-major and listed outermost first, so `[rows, cols]` has `cols`
//! contiguous.

use std::fmt;
use std::ops::Range;

use half::f16;
use thiserror::Error;

use crate::memory::Region;
use crate::quant::{self, BLOCK_BYTES, BLOCK_ELEMS};

pub const MAX_RANK: usize = 4;
pub const AUX_SLOTS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("invalid view of `{name}`: rows {start}..{end} out of {rows}")]
    InvalidView {
        name: String,
        start: usize,
        end: usize,
        rows: usize,
    },
    #[error("invalid view of `{name}`: rows {start}..{end} split a Q4B block")]
    UnalignedView {
        name: String,
        start: usize,
        end: usize,
    },
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("tensor `{name}`: expected {expected} data bytes, got {actual}")]
    DataLength {
        name: String,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    /// 4-bit block quantized, see [`crate::quant`].
    Q4B,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F16 => 1,
            DType::Q4B => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F16),
            2 => Ok(DType::Q4B),
            other => Err(TensorError::UnknownDType(other)),
        }
    }

    /// Bytes needed for `elems` contiguous elements.
    ///
    /// Returns `None` for Q4B when `elems` is not a whole number of blocks.
    pub fn bytes_for(self, elems: usize) -> Option<usize> {
        match self {
            DType::F32 => Some(elems * 4),
            DType::F16 => Some(elems * 2),
            DType::Q4B => (elems % BLOCK_ELEMS == 0).then(|| elems / BLOCK_ELEMS * BLOCK_BYTES),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::Q4B => "Q4B",
        })
    }
}

/// Up to four positive extents, outermost first.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(TensorError::InvalidShape {
                shape: dims.to_vec(),
                reason: format!("rank must be 1..={MAX_RANK}"),
            });
        }
        if dims.contains(&0) {
            return Err(TensorError::InvalidShape {
                shape: dims.to_vec(),
                reason: "extents must be positive".into(),
            });
        }
        let mut d = [1usize; MAX_RANK];
        d[..dims.len()].copy_from_slice(dims);
        Ok(Self {
            dims: d,
            rank: dims.len(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn numel(&self) -> usize {
        self.dims().iter().product()
    }

    /// Outermost extent.
    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Elements per outermost row (1 for rank-1 shapes).
    pub fn row_elems(&self) -> usize {
        self.dims()[1..].iter().product()
    }

    /// Innermost (contiguous) extent.
    pub fn inner(&self) -> usize {
        self.dims[self.rank - 1]
    }

    pub fn with_rows(&self, rows: usize) -> Shape {
        let mut s = *self;
        s.dims[0] = rows;
        s
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Total bytes occupied by a tensor of `shape` and `dtype`.
pub fn byte_size(shape: &[usize], dtype: DType) -> Result<usize, TensorError> {
    let s = Shape::new(shape)?;
    if dtype == DType::Q4B && s.inner() % BLOCK_ELEMS != 0 {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("Q4B innermost extent must be a multiple of {BLOCK_ELEMS}"),
        });
    }
    Ok(dtype.bytes_for(s.numel()).expect("checked block alignment"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(pub u32);

impl TensorId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    /// Leaf: weight, input or cache storage.
    None,
    MatMul,
    RMSNorm,
    RoPE,
    Attention,
    SiLU,
    Mul,
    Add,
    Copy,
    Reshape,
    Softmax,
    Scatter,
    Gather,
    Embed,
}

/// Small fixed array of operator parameters. Floats are stored by bit pattern.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AuxParams([u32; AUX_SLOTS]);

impl AuxParams {
    pub fn u32(&self, slot: usize) -> u32 {
        self.0[slot]
    }

    pub fn f32(&self, slot: usize) -> f32 {
        f32::from_bits(self.0[slot])
    }

    pub fn set_u32(&mut self, slot: usize, v: u32) -> &mut Self {
        self.0[slot] = v;
        self
    }

    pub fn set_f32(&mut self, slot: usize, v: f32) -> &mut Self {
        self.0[slot] = v.to_bits();
        self
    }
}

/// Tensor header.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Shape,
    pub dtype: DType,
    pub op: OpKind,
    pub sources: Vec<TensorId>,
    pub aux: AuxParams,
    pub region: Region,
    /// NUMA node this tensor is bound to, if any.
    pub node: Option<usize>,
}

impl Tensor {
    /// Creates a leaf header over `region`, checking that the region length
    /// matches the shape.
    pub fn leaf(name: impl Into<String>, shape: Shape, dtype: DType, region: Region) -> Result<Self, TensorError> {
        let name = name.into();
        let expected = byte_size(shape.dims(), dtype)?;
        if region.len != expected {
            return Err(TensorError::DataLength {
                name,
                expected,
                actual: region.len,
            });
        }
        Ok(Self {
            name,
            shape,
            dtype,
            op: OpKind::None,
            sources: Vec::new(),
            aux: AuxParams::default(),
            node: Some(region.node),
            region,
        })
    }

    pub fn byte_len(&self) -> usize {
        self.region.len
    }

    /// Bytes per outermost row.
    pub fn row_bytes(&self) -> usize {
        self.dtype
            .bytes_for(self.shape.row_elems())
            .expect("row of a valid tensor is block aligned")
    }
}

/// Returns a header aliasing rows `rows` of `src`. No data is copied.
pub fn make_view(src: &Tensor, rows: Range<usize>, name: impl Into<String>) -> Result<Tensor, TensorError> {
    let total = src.shape.rows();
    if rows.start >= rows.end || rows.end > total {
        return Err(TensorError::InvalidView {
            name: src.name.clone(),
            start: rows.start,
            end: rows.end,
            rows: total,
        });
    }
    let row_elems = src.shape.row_elems();
    let (Some(offset), Some(len)) = (
        src.dtype.bytes_for(rows.start * row_elems),
        src.dtype.bytes_for(rows.len() * row_elems),
    ) else {
        return Err(TensorError::UnalignedView {
            name: src.name.clone(),
            start: rows.start,
            end: rows.end,
        });
    };
    let mut region = src.region;
    region.offset += offset;
    region.len = len;
    Ok(Tensor {
        name: name.into(),
        shape: src.shape.with_rows(rows.len()),
        dtype: src.dtype,
        op: OpKind::Reshape,
        sources: Vec::new(),
        aux: AuxParams::default(),
        region,
        node: src.node,
    })
}

/// Ordered set of tensor handles standing for one logical value across lanes.
///
/// A one-element bundle converts to and from a plain [`TensorId`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorBundle(Vec<TensorId>);

impl TensorBundle {
    pub fn new(handles: Vec<TensorId>) -> Self {
        assert!(!handles.is_empty(), "a tensor bundle holds at least one handle");
        Self(handles)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn handles(&self) -> &[TensorId] {
        &self.0
    }

    pub fn lane(&self, lane: usize) -> TensorId {
        self.0[lane]
    }

    /// The single handle of a one-element bundle.
    pub fn single(&self) -> Option<TensorId> {
        (self.0.len() == 1).then(|| self.0[0])
    }

    pub fn iter(&self) -> impl Iterator<Item = TensorId> + '_ {
        self.0.iter().copied()
    }
}

impl From<TensorId> for TensorBundle {
    fn from(id: TensorId) -> Self {
        Self(vec![id])
    }
}

impl TryFrom<&TensorBundle> for TensorId {
    type Error = usize;

    /// Fails with the bundle size when it holds more than one handle.
    fn try_from(b: &TensorBundle) -> Result<Self, usize> {
        b.single().ok_or(b.len())
    }
}

/// Owned tensor data outside any arena: weight files and test fixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct HostTensor {
    pub name: String,
    pub shape: Shape,
    pub dtype: DType,
    pub data: Vec<u8>,
}

impl HostTensor {
    pub fn new(name: impl Into<String>, dims: &[usize], dtype: DType, data: Vec<u8>) -> Result<Self, TensorError> {
        let name = name.into();
        let expected = byte_size(dims, dtype)?;
        if data.len() != expected {
            return Err(TensorError::DataLength {
                name,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            name,
            shape: Shape::new(dims)?,
            dtype,
            data,
        })
    }

    pub fn from_f32(name: impl Into<String>, dims: &[usize], values: &[f32]) -> Result<Self, TensorError> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, dims, DType::F32, data)
    }

    /// Decodes to F32 regardless of storage type.
    pub fn to_f32(&self) -> Vec<f32> {
        decode_f32(&self.data, self.dtype)
    }

    /// Re-encodes an F32 tensor as `dtype`.
    pub fn convert(&self, dtype: DType) -> Result<Self, TensorError> {
        let values = self.to_f32();
        let data = match dtype {
            DType::F32 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            DType::F16 => values
                .iter()
                .flat_map(|v| f16::from_f32(*v).to_le_bytes())
                .collect(),
            DType::Q4B => {
                byte_size(self.shape.dims(), DType::Q4B)?;
                quant::quantize_q4b(&values)
            }
        };
        Self::new(self.name.clone(), self.shape.dims(), dtype, data)
    }
}

/// Decodes raw little-endian storage to F32 values.
pub fn decode_f32(bytes: &[u8], dtype: DType) -> Vec<f32> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        DType::Q4B => quant::dequantize_q4b(bytes),
    }
}
