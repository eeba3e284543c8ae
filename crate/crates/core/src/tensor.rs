//! Dense tensors and their on-disk interchange format.
//!
//! Files use the npy v1.0 layout restricted to C-order, little-endian payloads
//! with one of four element types:
//!
//! ```text
//! \x93NUMPY  0x01 0x00  <u16 LE header length>  {'descr': '<f4', 'fortran_order': False, 'shape': (2, 2), }   ...\n
//! <raw payload>
//! ```
//!
//! The header dictionary is padded with spaces so that the payload starts on a
//! 64-byte boundary, and terminated by a newline.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, Dimension, IxDyn};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
pub const MAX_RANK: usize = 4;
const HEADER_ALIGN: usize = 64;
/// magic + version + u16 header length
const PREAMBLE_LEN: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("unsupported layout: {0}")]
    UnsupportedLayout(&'static str),
    #[error("unsupported format version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("shape {shape:?} implies {expected} elements but data has {found}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("rank {0} exceeds the supported maximum of {MAX_RANK}")]
    RankTooHigh(usize),
    #[error("invalid bool byte {0:#04x}")]
    InvalidBool(u8),
    #[error("expected {expected} tensor, found {found}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("expected rank {expected}, found shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
    Bool,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 | DType::Bool => 1,
        }
    }

    pub fn descr(self) -> &'static str {
        match self {
            DType::F32 => "<f4",
            DType::F64 => "<f8",
            DType::U8 => "|u1",
            DType::Bool => "|b1",
        }
    }

    fn from_descr(descr: &str) -> Result<Self, TensorError> {
        match descr {
            "<f4" => Ok(DType::F32),
            "<f8" => Ok(DType::F64),
            "|u1" | "<u1" | "u1" => Ok(DType::U8),
            "|b1" | "<b1" | "b1" => Ok(DType::Bool),
            d if d.starts_with('>') => Err(TensorError::UnsupportedLayout("big-endian payload")),
            d => Err(TensorError::UnsupportedDtype(d.to_string())),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::U8 => "u8",
            DType::Bool => "bool",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
            TensorData::Bool(_) => DType::Bool,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Element types that can live inside a [`Tensor`].
pub trait Element: Clone + Sized {
    const DTYPE: DType;
    fn wrap(values: Vec<Self>) -> TensorData;
    fn unwrap(data: &TensorData) -> Option<&[Self]>;
}

macro_rules! impl_element {
    ($ty:ty, $variant:ident) => {
        impl Element for $ty {
            const DTYPE: DType = DType::$variant;

            fn wrap(values: Vec<Self>) -> TensorData {
                TensorData::$variant(values)
            }

            fn unwrap(data: &TensorData) -> Option<&[Self]> {
                match data {
                    TensorData::$variant(v) => Some(v),
                    _ => None,
                }
            }
        }
    };
}

impl_element!(f32, F32);
impl_element!(f64, F64);
impl_element!(u8, U8);
impl_element!(bool, Bool);

/// A dense row-major tensor of rank at most four.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self, TensorError> {
        if shape.len() > MAX_RANK {
            return Err(TensorError::RankTooHigh(shape.len()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_array<A, S, D>(array: &ndarray::ArrayBase<S, D>) -> Result<Self, TensorError>
    where
        A: Element,
        S: ndarray::Data<Elem = A>,
        D: Dimension,
    {
        let shape = array.shape().to_vec();
        let values: Vec<A> = array.iter().cloned().collect();
        Self::new(shape, A::wrap(values))
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

    pub fn as_slice<A: Element>(&self) -> Result<&[A], TensorError> {
        A::unwrap(&self.data).ok_or(TensorError::DtypeMismatch {
            expected: A::DTYPE,
            found: self.dtype(),
        })
    }

    /// Converts into an ndarray of the requested element type and rank.
    pub fn to_array<A, D>(&self) -> Result<ndarray::Array<A, D>, TensorError>
    where
        A: Element,
        D: Dimension,
    {
        let values = self.as_slice::<A>()?.to_vec();
        let dynamic = ArrayD::from_shape_vec(IxDyn(&self.shape), values).map_err(|_| {
            TensorError::ShapeMismatch {
                shape: self.shape.clone(),
                expected: self.shape.iter().product(),
                found: self.data.len(),
            }
        })?;
        let rank = D::NDIM.unwrap_or(self.shape.len());
        dynamic
            .into_dimensionality::<D>()
            .map_err(|_| TensorError::RankMismatch {
                expected: rank,
                shape: self.shape.clone(),
            })
    }

    /// Equality that compares float payloads by bit pattern, so NaNs compare equal.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.dtype() == other.dtype()
            && self.payload_bytes() == other.payload_bytes()
    }

    fn payload_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::U8(v) => v.clone(),
            TensorData::Bool(v) => v.iter().map(|&b| b as u8).collect(),
        }
    }

    /// Serializes header and payload into a single buffer.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = encode_header(self.dtype(), &self.shape);
        let mut out = Vec::with_capacity(header.len() + self.data.len() * self.dtype().size());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.payload_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        let (header, payload) = split_header(bytes)?;
        let dict = HeaderDict::parse(header)?;
        if dict.fortran_order {
            return Err(TensorError::UnsupportedLayout("fortran order"));
        }
        if dict.shape.len() > MAX_RANK {
            return Err(TensorError::RankTooHigh(dict.shape.len()));
        }
        let count = dict
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| TensorError::MalformedHeader("shape overflows".into()))?;
        let expected = count
            .checked_mul(dict.dtype.size())
            .ok_or_else(|| TensorError::MalformedHeader("shape overflows".into()))?;
        if payload.len() < expected {
            return Err(TensorError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(TensorError::TrailingBytes(payload.len() - expected));
        }
        let data = decode_payload(dict.dtype, payload)?;
        Tensor::new(dict.shape, data)
    }
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&tensor.to_bytes())?;
    file.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let bytes = fs::read(path)?;
    Tensor::from_bytes(&bytes)
}

fn encode_header(dtype: DType, shape: &[usize]) -> Vec<u8> {
    let shape_repr = match shape {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => {
            let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
            format!("({})", parts.join(", "))
        }
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_repr
    );
    // Pad so that preamble + dict + '\n' is a multiple of the alignment.
    let unpadded = PREAMBLE_LEN + dict.len() + 1;
    let padding = (HEADER_ALIGN - unpadded % HEADER_ALIGN) % HEADER_ALIGN;
    dict.extend(std::iter::repeat_n(' ', padding));
    dict.push('\n');

    let mut out = Vec::with_capacity(PREAMBLE_LEN + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

fn split_header(bytes: &[u8]) -> Result<(&str, &[u8]), TensorError> {
    if bytes.len() < PREAMBLE_LEN || &bytes[..6] != MAGIC {
        return Err(TensorError::MalformedHeader("missing magic bytes".into()));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    if (major, minor) != (1, 0) {
        return Err(TensorError::UnsupportedVersion(major, minor));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let end = PREAMBLE_LEN + header_len;
    if bytes.len() < end {
        return Err(TensorError::MalformedHeader(format!(
            "header declares {header_len} bytes but file is shorter"
        )));
    }
    let header = std::str::from_utf8(&bytes[PREAMBLE_LEN..end])
        .map_err(|_| TensorError::MalformedHeader("header is not valid text".into()))?;
    if !header.ends_with('\n') {
        return Err(TensorError::MalformedHeader(
            "header not terminated by newline".into(),
        ));
    }
    Ok((header, &bytes[end..]))
}

fn decode_payload(dtype: DType, payload: &[u8]) -> Result<TensorData, TensorError> {
    Ok(match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
        DType::Bool => TensorData::Bool(
            payload
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(TensorError::InvalidBool(other)),
                })
                .collect::<Result<_, _>>()?,
        ),
    })
}

struct HeaderDict {
    dtype: DType,
    fortran_order: bool,
    shape: Vec<usize>,
}

impl HeaderDict {
    fn parse(text: &str) -> Result<Self, TensorError> {
        let body = text
            .trim()
            .strip_prefix('{')
            .and_then(|s| s.strip_suffix('}'))
            .ok_or_else(|| TensorError::MalformedHeader("header is not a dict literal".into()))?;

        let mut descr = None;
        let mut fortran = None;
        let mut shape = None;
        let mut cursor = Cursor::new(body);
        loop {
            cursor.skip_ws();
            if cursor.at_end() {
                break;
            }
            let key = cursor.quoted()?;
            cursor.skip_ws();
            cursor.expect(':')?;
            cursor.skip_ws();
            match key.as_str() {
                "descr" => descr = Some(cursor.quoted()?),
                "fortran_order" => fortran = Some(cursor.boolean()?),
                "shape" => shape = Some(cursor.tuple()?),
                other => {
                    return Err(TensorError::MalformedHeader(format!(
                        "unexpected key {other:?}"
                    )))
                }
            }
            cursor.skip_ws();
            if !cursor.eat(',') {
                cursor.skip_ws();
                if !cursor.at_end() {
                    return Err(TensorError::MalformedHeader("expected ','".into()));
                }
            }
        }

        let descr = descr.ok_or_else(|| TensorError::MalformedHeader("missing 'descr'".into()))?;
        let fortran_order = fortran
            .ok_or_else(|| TensorError::MalformedHeader("missing 'fortran_order'".into()))?;
        let shape = shape.ok_or_else(|| TensorError::MalformedHeader("missing 'shape'".into()))?;
        Ok(Self {
            dtype: DType::from_descr(&descr)?,
            fortran_order,
            shape,
        })
    }
}

struct Cursor<'a> {
    rest: &'a str,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Self { rest: text }
    }

    fn at_end(&self) -> bool {
        self.rest.is_empty()
    }

    fn skip_ws(&mut self) {
        self.rest = self.rest.trim_start();
    }

    fn eat(&mut self, c: char) -> bool {
        match self.rest.strip_prefix(c) {
            Some(rest) => {
                self.rest = rest;
                true
            }
            None => false,
        }
    }

    fn expect(&mut self, c: char) -> Result<(), TensorError> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(TensorError::MalformedHeader(format!("expected {c:?}")))
        }
    }

    fn quoted(&mut self) -> Result<String, TensorError> {
        let quote = self
            .rest
            .chars()
            .next()
            .filter(|c| *c == '\'' || *c == '"')
            .ok_or_else(|| TensorError::MalformedHeader("expected quoted string".into()))?;
        let inner = &self.rest[1..];
        let end = inner
            .find(quote)
            .ok_or_else(|| TensorError::MalformedHeader("unterminated string".into()))?;
        let value = inner[..end].to_string();
        self.rest = &inner[end + 1..];
        Ok(value)
    }

    fn boolean(&mut self) -> Result<bool, TensorError> {
        if let Some(rest) = self.rest.strip_prefix("True") {
            self.rest = rest;
            Ok(true)
        } else if let Some(rest) = self.rest.strip_prefix("False") {
            self.rest = rest;
            Ok(false)
        } else {
            Err(TensorError::MalformedHeader("expected True or False".into()))
        }
    }

    fn tuple(&mut self) -> Result<Vec<usize>, TensorError> {
        self.expect('(')?;
        let end = self
            .rest
            .find(')')
            .ok_or_else(|| TensorError::MalformedHeader("unterminated shape tuple".into()))?;
        let inner = &self.rest[..end];
        self.rest = &self.rest[end + 1..];
        inner
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.trim_end_matches('L').parse::<usize>().map_err(|_| {
                    TensorError::MalformedHeader(format!("invalid shape entry {s:?}"))
                })
            })
            .collect()
    }
}
