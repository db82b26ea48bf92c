//! Dense NCHW tensors and the layer primitives built on them.
//!
//! Every primitive comes as a forward function plus an explicit backward
//! function that maps an upstream gradient to gradients of the inputs and
//! parameters. [`gradcheck`] holds the central-difference oracle used to
//! validate them.

mod conv;
mod elementwise;
pub mod gradcheck;
mod loss;
mod norm;
mod pool;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, ConvGrads, ConvParams,
};
pub use elementwise::{
    center_crop, center_crop_backward, crop_margins, elementwise_sum, relu, relu_backward,
};
pub use loss::{softmax_cross_entropy_weighted, LabelMap, LossOutput, VOID_LABEL};
pub use norm::{batchnorm2d, batchnorm2d_backward, BnCache, BnGrads, BnMode, BnParams};
pub use pool::{maxpool2d, maxpool2d_backward, PoolOutput};

/// Extents of a 4-D tensor: batch, channels, height, width.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW array of `f64` with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(
            shape.n > 0 && shape.c > 0 && shape.h > 0 && shape.w > 0,
            "tensor dimensions must be positive, got {shape}"
        );
        Tensor {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::dim(format!(
                "tensor dimensions must be positive, got {shape}"
            )));
        }
        if data.len() != shape.numel() {
            return Err(Error::dim(format!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut i = 0;
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        t.data[i] = f(n, c, y, x);
                        i += 1;
                    }
                }
            }
        }
        t
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `C*H*W` slice of one batch item.
    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "axpy shape mismatch: {} vs {}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Writes four little-endian `u64` dims followed by the little-endian `f64` payload.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for d in self.shape.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.data.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut dims = [0usize; 4];
        let mut buf = [0u8; 8];
        for (i, d) in dims.iter_mut().enumerate() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(i * 8, "truncated tensor header"))?;
            *d = usize::try_from(u64::from_le_bytes(buf))
                .map_err(|_| Error::format(i * 8, "tensor dimension overflows usize"))?;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        if shape.numel() == 0 {
            return Err(Error::format(
                0,
                format!("tensor has a zero dimension: {shape}"),
            ));
        }
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..shape.numel() {
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(32 + 8 * i, "truncated tensor payload"))?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::from_vec(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major_with_w_fastest() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.data()[1], 1.0);
        assert_eq!(t.data()[5], 10.0);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.sample(1)[0], 1000.0);
    }

    #[test]
    fn rejects_bad_length_and_zero_dims() {
        assert!(matches!(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(Tensor::from_vec(Shape::new(1, 0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn grad_slot_allocates_lazily_with_same_shape() {
        let mut t = Tensor::zeros(Shape::new(1, 2, 3, 3));
        assert!(t.grad().is_none());
        t.grad_mut()[4] = 2.0;
        assert_eq!(t.grad().unwrap().len(), t.len());
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn serialization_layout_is_dims_then_payload() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.5, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 32 + 16);
        assert_eq!(&bytes[0..8], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &2u64.to_le_bytes());
        assert_eq!(&bytes[32..40], &1.5f64.to_le_bytes());
        let back = Tensor::read_from(&bytes[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let t = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let bytes = t.to_bytes();
        let err = Tensor::read_from(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 56, .. }), "{err}");
    }
}
