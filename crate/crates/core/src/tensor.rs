//! Value types shared by every algorithm: tensors, process groups, element-wise
//! reduction and chunk partitioning.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of a process within a group, in `0..size`.
pub type Rank = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Float64 => 8,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            DType::Float32 => 0,
            DType::Float64 => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Float32),
            1 => Ok(DType::Float64),
            other => Err(Error::Protocol(format!("unknown dtype code {other}"))),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::Float32 => "float32",
            DType::Float64 => "float64",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    #[default]
    Sum,
    Max,
}

/// Scalar types a tensor may hold.
pub trait Element: Copy + PartialOrd + Send + Sync + fmt::Debug + 'static {
    const DTYPE: DType;

    fn combine(self, other: Self, op: ReduceOp) -> Self;
    fn extend_le_bytes(values: &[Self], out: &mut Vec<u8>);
    fn from_le_chunk(bytes: &[u8]) -> Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;

    fn decode(bytes: &[u8]) -> Result<Vec<Self>> {
        let size = Self::DTYPE.size();
        if bytes.len() % size != 0 {
            return Err(Error::Shape(format!(
                "{} bytes is not a whole number of {} elements",
                bytes.len(),
                Self::DTYPE
            )));
        }
        Ok(bytes.chunks_exact(size).map(Self::from_le_chunk).collect())
    }

    fn encode(values: &[Self]) -> Vec<u8> {
        let mut out = Vec::with_capacity(values.len() * Self::DTYPE.size());
        Self::extend_le_bytes(values, &mut out);
        out
    }
}

macro_rules! float_element {
    ($ty:ty, $dtype:expr, $n:expr) => {
        impl Element for $ty {
            const DTYPE: DType = $dtype;

            #[inline]
            fn combine(self, other: Self, op: ReduceOp) -> Self {
                match op {
                    ReduceOp::Sum => self + other,
                    ReduceOp::Max => {
                        if other > self {
                            other
                        } else {
                            self
                        }
                    }
                }
            }

            fn extend_le_bytes(values: &[Self], out: &mut Vec<u8>) {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            #[inline]
            fn from_le_chunk(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $n];
                buf.copy_from_slice(bytes);
                <$ty>::from_le_bytes(buf)
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }
        }
    };
}

float_element!(f32, DType::Float32, 4);
float_element!(f64, DType::Float64, 8);

/// Contiguous payload; the element count is the vector length.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::Float32,
            Payload::F64(_) => DType::Float64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros(dtype: DType, len: usize) -> Self {
        match dtype {
            DType::Float32 => Payload::F32(vec![0.0; len]),
            DType::Float64 => Payload::F64(vec![0.0; len]),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Payload::F32(v) => f32::encode(v),
            Payload::F64(v) => f64::encode(v),
        }
    }

    pub fn from_bytes(dtype: DType, bytes: &[u8]) -> Result<Self> {
        Ok(match dtype {
            DType::Float32 => Payload::F32(f32::decode(bytes)?),
            DType::Float64 => Payload::F64(f64::decode(bytes)?),
        })
    }
}

/// A named numeric vector: the unit of reduction and transfer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    payload: Payload,
}

impl Tensor {
    pub fn new(name: impl Into<String>, payload: Payload) -> Self {
        Self {
            name: name.into(),
            payload,
        }
    }

    pub fn from_f32(name: impl Into<String>, values: Vec<f32>) -> Self {
        Self::new(name, Payload::F32(values))
    }

    pub fn from_f64(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self::new(name, Payload::F64(values))
    }

    pub fn zeros(name: impl Into<String>, dtype: DType, len: usize) -> Self {
        Self::new(name, Payload::zeros(dtype, len))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn dtype(&self) -> DType {
        self.payload.dtype()
    }

    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.dtype().size()
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn payload_mut(&mut self) -> &mut Payload {
        &mut self.payload
    }

    pub fn into_payload(self) -> Payload {
        self.payload
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.payload {
            Payload::F32(v) => Some(v),
            Payload::F64(_) => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.payload {
            Payload::F64(v) => Some(v),
            Payload::F32(_) => None,
        }
    }

    /// Values widened to f64, for comparisons in tests and reports.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.payload.to_bytes()
    }

    /// Checks that `other` could be reduced element-wise with `self`.
    pub fn check_compatible(&self, other: &Tensor) -> Result<()> {
        if self.dtype() != other.dtype() {
            return Err(Error::Shape(format!(
                "dtype mismatch for {:?}: {} vs {}",
                self.name,
                self.dtype(),
                other.dtype()
            )));
        }
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "length mismatch for {:?}: {} vs {}",
                self.name,
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// A process group `0..size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupSpec {
    size: usize,
}

impl GroupSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidGroup("group size must be at least 1".into()));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn ranks(&self) -> std::ops::Range<Rank> {
        0..self.size
    }

    pub fn contains(&self, rank: Rank) -> bool {
        rank < self.size
    }

    pub fn check_rank(&self, rank: Rank) -> Result<()> {
        if self.contains(rank) {
            Ok(())
        } else {
            Err(Error::Routing {
                rank,
                size: self.size,
            })
        }
    }
}

/// `acc[i] <- acc[i] op incoming[i]`.
pub fn reduce_into<E: Element>(acc: &mut [E], incoming: &[E], op: ReduceOp) -> Result<()> {
    if acc.len() != incoming.len() {
        return Err(Error::Shape(format!(
            "cannot reduce {} elements into {}",
            incoming.len(),
            acc.len()
        )));
    }
    for (a, &b) in acc.iter_mut().zip(incoming) {
        *a = a.combine(b, op);
    }
    Ok(())
}

/// Element-wise `a op b`. The result keeps `a`'s name.
pub fn local_reduce(a: &Tensor, b: &Tensor, op: ReduceOp) -> Result<Tensor> {
    a.check_compatible(b)?;
    let mut out = a.clone();
    match (&mut out.payload, &b.payload) {
        (Payload::F32(acc), Payload::F32(inc)) => reduce_into(acc, inc, op)?,
        (Payload::F64(acc), Payload::F64(inc)) => reduce_into(acc, inc, op)?,
        _ => unreachable!("dtype checked above"),
    }
    Ok(out)
}

/// A contiguous `[offset, offset + len)` element range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Chunk {
    pub offset: usize,
    pub len: usize,
}

impl Chunk {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Splits `n` elements into `p` contiguous chunks. The first `n % p` chunks
/// get one extra element.
pub fn chunk_partition(n: usize, p: usize) -> Result<Vec<Chunk>> {
    if p == 0 {
        return Err(Error::InvalidGroup("cannot partition over zero processes".into()));
    }
    let base = n / p;
    let extra = n % p;
    let mut offset = 0;
    Ok((0..p)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let chunk = Chunk { offset, len };
            offset += len;
            chunk
        })
        .collect())
}
