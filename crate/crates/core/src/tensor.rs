//! Dense row-major tensors and the run-level precision flag.
//!
//! Values are stored as `f64`. When the working precision is [`Precision::F32`]
//! every tensor produced by an operation is rounded through `f32`, so results
//! are exactly what an `f32` pipeline with `f64` accumulation would store.

use std::cell::Cell;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F32) };
}

impl Precision {
    pub fn current() -> Precision {
        PRECISION.with(|p| p.get())
    }

    pub fn set(self) {
        PRECISION.with(|p| p.set(self));
    }

    /// Most negative finite value representable at this precision; used as
    /// the masking sentinel for attention similarities.
    pub fn neg_sentinel(self) -> f64 {
        match self {
            Precision::F32 => f32::MIN as f64,
            Precision::F64 => f64::MIN,
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

/// Runs `f` with the calling thread's precision set to `p`, restoring the
/// previous value afterwards.
pub fn with_precision<T>(p: Precision, f: impl FnOnce() -> T) -> T {
    struct Restore(Precision);
    impl Drop for Restore {
        fn drop(&mut self) {
            self.0.set();
        }
    }
    let _restore = Restore(Precision::current());
    p.set();
    f()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rounding to the working precision. Fails on a length
    /// mismatch or non-finite data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_op("tensor", shape, data)
    }

    pub(crate) fn from_op(
        op: &'static str,
        shape: impl Into<Vec<usize>>,
        mut data: Vec<f64>,
    ) -> Result<Tensor> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                op,
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op, index });
        }
        let p = Precision::current();
        if p == Precision::F32 {
            for v in &mut data {
                *v = p.round(*v);
            }
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![Precision::current().round(value); n],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![Precision::current().round(value)],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Result<Tensor> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        Tensor::from_op("map", self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Number of rows when viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        let c = self.last_dim();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub(crate) fn check_shape(&self, op: &'static str, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(
                op,
                format!("expected {:?}, got {:?}", expected, self.shape),
            ));
        }
        Ok(())
    }

    /// Accumulates `other` into `self` elementwise.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Permutes a `[c, h, w]` tensor into `[h, w, c]`.
    pub fn chw_to_hwc(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape("chw_to_hwc", format!("rank {}", self.rank())));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0; self.data.len()];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(y * w + x) * c + ci] = self.data[(ci * h + y) * w + x];
                }
            }
        }
        Ok(Tensor {
            shape: vec![h, w, c],
            data: out,
        })
    }

    /// Permutes a `[h, w, c]` tensor into `[c, h, w]`.
    pub fn hwc_to_chw(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape("hwc_to_chw", format!("rank {}", self.rank())));
        }
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    out[(ci * h + y) * w + x] = self.data[(y * w + x) * c + ci];
                }
            }
        }
        Ok(Tensor {
            shape: vec![c, h, w],
            data: out,
        })
    }
}

pub(crate) const MTN1_MAGIC: &[u8; 4] = b"MTN1";

/// Writes `t` as an MTN1 record: magic, u32 LE rank, rank x u32 LE extents,
/// then the values as f32 LE in row-major order.
pub fn write_mtn1<W: Write>(mut out: W, t: &Tensor) -> std::io::Result<()> {
    out.write_all(MTN1_MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn read_mtn1<R: Read>(mut input: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic, "magic")?;
    if &magic != MTN1_MAGIC {
        return Err(Error::format("MTN1", format!("bad magic {:?}", magic)));
    }
    let rank = read_u32(&mut input, "rank")? as usize;
    if rank > 16 {
        return Err(Error::format("MTN1", format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut input, "extent")? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    read_exact(&mut input, &mut bytes, "payload")?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|e| Error::format("MTN1", format!("truncated {what}: {e}")))
}

fn read_u32<R: Read>(input: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(input, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
