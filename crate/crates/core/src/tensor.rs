//! Dense rank-4 tensors in `(n, c, h, w)` layout and the `ST4` fixture format.

use std::fmt;
use std::io::{Read, Write};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating point precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Single,
    Double,
}

impl DType {
    pub fn size_of(self) -> usize {
        match self {
            DType::Single => 4,
            DType::Double => 8,
        }
    }

    /// Code used in the fixture header.
    pub fn code(self) -> u8 {
        match self {
            DType::Single => 0,
            DType::Double => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::Single),
            1 => Ok(DType::Double),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::Single => f.write_str("single"),
            DType::Double => f.write_str("double"),
        }
    }
}

/// Scalar element type: implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::Single;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::Double;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Tensor dimensions `(n, c, h, w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major `(n, c, h, w)` array.
#[derive(Clone, PartialEq)]
pub struct Tensor4<T> {
    dims: Dims,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor4<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .finish_non_exhaustive()
    }
}

impl<T: Scalar> Tensor4<T> {
    pub fn zeros(dims: Dims) -> Self {
        Tensor4 {
            dims,
            data: vec![T::zero(); dims.len()],
        }
    }

    pub fn filled(dims: Dims, value: T) -> Self {
        Tensor4 {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!("{} values for dims {dims}", data.len())));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Bytes occupied by the scalar payload.
    pub fn nbytes(&self) -> usize {
        self.data.len() * T::DTYPE.size_of()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + y) * self.dims.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Same data viewed under new dims with equal element count.
    pub fn reshape(self, dims: Dims) -> Result<Self> {
        if dims.len() != self.dims.len() {
            return Err(Error::Shape(format!("cannot reshape {} into {dims}", self.dims)));
        }
        Ok(Tensor4 { dims, data: self.data })
    }

    /// Copy of the spatial window `[y0, y0+h) x [x0, x0+w)` over all batches and channels.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.dims.h || x0 + w > self.dims.w {
            return Err(Error::Shape(format!(
                "crop [{y0},{}) x [{x0},{}) outside {}",
                y0 + h,
                x0 + w,
                self.dims
            )));
        }
        let dims = Dims::new(self.dims.n, self.dims.c, h, w);
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..h {
                    let start = self.index(n, c, y0 + y, x0);
                    data.extend_from_slice(&self.data[start..start + w]);
                }
            }
        }
        Ok(Tensor4 { dims, data })
    }

    /// Writes `src` into this tensor with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &Tensor4<T>, y0: usize, x0: usize) -> Result<()> {
        let s = src.dims;
        if s.n != self.dims.n || s.c != self.dims.c || y0 + s.h > self.dims.h || x0 + s.w > self.dims.w {
            return Err(Error::Shape(format!(
                "cannot paste {s} at ({y0},{x0}) into {}",
                self.dims
            )));
        }
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    let dst = self.index(n, c, y0 + y, x0);
                    let from = src.index(n, c, y, 0);
                    self.data[dst..dst + s.w].copy_from_slice(&src.data[from..from + s.w]);
                }
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Errors on the first NaN or infinity.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what} at flat index {i}"))),
        }
    }

    /// Converts element type, going through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// Encodes as an `ST4` fixture: magic `ST4\0`, dtype code, four `u32` dims, payload, all little-endian.
    pub fn to_fixture_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(21 + self.nbytes());
        out.extend_from_slice(FIXTURE_MAGIC);
        out.push(T::DTYPE.code());
        for d in [self.dims.n, self.dims.c, self.dims.h, self.dims.w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn from_fixture_bytes(bytes: &[u8]) -> Result<Self> {
        let header = read_fixture_header(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "fixture holds {} data, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        let size = T::DTYPE.size_of();
        let payload = &bytes[FIXTURE_HEADER_LEN..];
        if payload.len() != header.dims.len() * size {
            return Err(Error::Format(format!(
                "payload of {} bytes does not match dims {}",
                payload.len(),
                header.dims
            )));
        }
        let data = payload.chunks_exact(size).map(T::read_le).collect();
        Ok(Tensor4 {
            dims: header.dims,
            data,
        })
    }

    pub fn write_fixture<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_fixture_bytes())?;
        Ok(())
    }

    pub fn read_fixture<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_fixture_bytes(&bytes)
    }
}

pub const FIXTURE_MAGIC: &[u8; 4] = b"ST4\0";
const FIXTURE_HEADER_LEN: usize = 4 + 1 + 16;

/// Decoded `ST4` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureHeader {
    pub dtype: DType,
    pub dims: Dims,
}

pub fn read_fixture_header(bytes: &[u8]) -> Result<FixtureHeader> {
    if bytes.len() < FIXTURE_HEADER_LEN {
        return Err(Error::Format("truncated fixture header".into()));
    }
    if &bytes[..4] != FIXTURE_MAGIC {
        return Err(Error::Format("bad fixture magic".into()));
    }
    let dtype = DType::from_code(bytes[4])?;
    let dim = |i: usize| {
        let off = 5 + 4 * i;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize
    };
    Ok(FixtureHeader {
        dtype,
        dims: Dims::new(dim(0), dim(1), dim(2), dim(3)),
    })
}
