//! Dense n-dimensional tensor and the `PAVT` binary container.
//!
//! The same tensor backs both precision modes: `f64` for oracles and
//! gradient checks, `f32` for training. Scalars are rank-0 tensors.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Element type for all tensor math. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float + fmt::Debug + fmt::Display + Default + Send + Sync + 'static
{
    const DTYPE: Dtype;

    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Element dtype tag in the binary container. 0 = f32, 1 = f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::invalid("tensor_read", format!("bad dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    /// Populated by `Graph::backward` for bound parameters; same length as `data`.
    pub grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor_new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor_new", format!("zero dim in shape {shape:?}")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Scalar value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[flat_index(&self.shape, idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let i = flat_index(&self.shape, idx);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_()).collect()
    }

    // ── PAVT single-tensor container ────────────────────────────────

    /// Serialize: magic `PAVT`, u8 version=1, u8 dtype, u8 rank,
    /// little-endian u64 dims, raw little-endian values.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(b"PAVT");
        out.push(1u8);
        out.push(T::DTYPE as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(out);
        }
    }

    pub fn read_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let need = |off: usize, n: usize| -> Result<()> {
            if bytes.len() < off + n {
                Err(Error::Parse {
                    what: "PAVT",
                    offset: bytes.len(),
                    detail: format!("truncated: need {} bytes at offset {off}", n),
                })
            } else {
                Ok(())
            }
        };
        need(0, 7)?;
        if &bytes[0..4] != b"PAVT" {
            return Err(Error::Parse {
                what: "PAVT",
                offset: 0,
                detail: "bad magic".into(),
            });
        }
        if bytes[4] != 1 {
            return Err(Error::Parse {
                what: "PAVT",
                offset: 4,
                detail: format!("unsupported version {}", bytes[4]),
            });
        }
        let dtype = Dtype::from_u8(bytes[5])?;
        if dtype != T::DTYPE {
            return Err(Error::invalid(
                "tensor_read",
                format!("file dtype {:?} does not match requested {:?}", dtype, T::DTYPE),
            ));
        }
        let rank = bytes[6] as usize;
        let mut off = 7;
        need(off, rank * 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            b.copy_from_slice(&bytes[off..off + 8]);
            shape.push(u64::from_le_bytes(b) as usize);
            off += 8;
        }
        let numel: usize = shape.iter().product();
        let w = dtype.width();
        need(off, numel * w)?;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            data.push(T::read_le(&bytes[off + i * w..]));
        }
        off += numel * w;
        Ok((
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            off,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_bytes(&mut buf);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let (t, used) = Self::read_bytes(&buf)?;
        if used != buf.len() {
            return Err(Error::Parse {
                what: "PAVT",
                offset: used,
                detail: format!("{} trailing bytes", buf.len() - used),
            });
        }
        Ok(t)
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub fn flat_index(shape: &[usize], idx: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), idx.len());
    let mut flat = 0;
    let mut stride = 1;
    for d in (0..shape.len()).rev() {
        debug_assert!(idx[d] < shape[d], "index {idx:?} out of bounds for {shape:?}");
        flat += idx[d] * stride;
        stride *= shape[d];
    }
    flat
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_checked() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::<f64>::scalar(4.5);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.5);
    }

    #[test]
    fn indexing_row_major() {
        let t = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[1, 0, 2]), 14.0);
        assert_eq!(t.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn container_round_trip_bit_exact() {
        let t = Tensor::<f32>::from_fn(&[3, 5], |i| (i as f32).sin() * 1e-3 + 0.1);
        let mut buf = Vec::new();
        t.write_bytes(&mut buf);
        let (back, used) = Tensor::<f32>::read_bytes(&buf).unwrap();
        assert_eq!(used, buf.len());
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn container_rejects_truncation_and_dtype() {
        let t = Tensor::<f64>::from_fn(&[4], |i| i as f64);
        let mut buf = Vec::new();
        t.write_bytes(&mut buf);
        assert!(Tensor::<f64>::read_bytes(&buf[..buf.len() - 3]).is_err());
        assert!(Tensor::<f32>::read_bytes(&buf).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Tensor::<f64>::read_bytes(&bad).is_err());
    }

    #[test]
    fn scalar_container_round_trip() {
        let t = Tensor::<f64>::scalar(-7.25);
        let mut buf = Vec::new();
        t.write_bytes(&mut buf);
        let (back, _) = Tensor::<f64>::read_bytes(&buf).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.item(), -7.25);
    }
}
