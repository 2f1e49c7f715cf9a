//! Dense tensors, convolution kernels, and a small reverse-mode autodiff graph.
//!
//! Everything is generic over [`Real`] so the same forward code can be
//! re-evaluated in 64-bit precision for gradient checking. Production paths
//! run in `f32`.

mod conv;
mod graph;
mod gradcheck;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use conv::{
    conv2d, conv2d_backward, conv_transpose2d, conv_transpose2d_backward, same_padding,
    transposed_padding, ConvGrads, Padding,
};
pub use gradcheck::{grad_check, GradCheckReport, Probe};
pub(crate) use graph::{sigmoid, softplus};
pub use graph::{Graph, Gradients, NodeId, Op};

/// Floating-point element type of a [`Tensor`].
pub trait Real:
    Float + Default + Debug + Send + Sync + std::ops::AddAssign + std::ops::SubAssign + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Dense row-major N-dimensional array.
///
/// 4-D tensors use the `[batch, channels, height, width]` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("extents must be >= 1, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "bad shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extents of a 4-D tensor as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a 4-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of the leading sub-block `[0:s0, 0:s1, ...]`.
    pub fn slice_leading(&self, shape: &[usize]) -> Result<Self> {
        if shape.len() != self.shape.len()
            || shape.iter().zip(&self.shape).any(|(&s, &f)| s == 0 || s > f)
        {
            return Err(Error::shape(format!(
                "leading slice {shape:?} does not fit in {:?}",
                self.shape
            )));
        }
        let mut out = Tensor::zeros(shape);
        let src_strides = strides(&self.shape);
        let dst_strides = strides(shape);
        for (dst, v) in out.data.iter_mut().enumerate() {
            let mut rem = dst;
            let mut src = 0;
            for (d, &st) in dst_strides.iter().enumerate() {
                let idx = rem / st;
                rem %= st;
                src += idx * src_strides[d];
            }
            *v = self.data[src];
        }
        Ok(out)
    }

    /// Adds `part` into the leading sub-block of `self` (inverse of [`slice_leading`]).
    ///
    /// [`slice_leading`]: Tensor::slice_leading
    pub fn add_leading(&mut self, part: &Self) {
        let src_strides = strides(&self.shape);
        let part_strides = strides(&part.shape);
        for (i, &v) in part.data.iter().enumerate() {
            let mut rem = i;
            let mut dst = 0;
            for (d, &st) in part_strides.iter().enumerate() {
                let idx = rem / st;
                rem %= st;
                dst += idx * src_strides[d];
            }
            self.data[dst] += v;
        }
    }

    /// Channel range `[start, start + len)` of a 4-D tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "channel slice [{start}, {}) outside {c} channels",
                start + len
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::new(vec![b, len, h, w], data)
    }

    /// Concatenates two 4-D tensors along the channel axis, `a` first.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let (ba, ca, ha, wa) = a.dims4()?;
        let (bb, cb, hb, wb) = b.dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels: batch/spatial mismatch {:?} vs {:?}",
                a.shape, b.shape
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            data.extend_from_slice(&a.data[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&b.data[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        Tensor::new(vec![ba, ca + cb, ha, wa], data)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn leading_slice_and_scatter() {
        let t = Tensor::<f32>::from_fn(&[3, 4, 2], |i| i as f32);
        let s = t.slice_leading(&[2, 3, 1]).unwrap();
        assert_eq!(s.data(), &[0.0, 2.0, 4.0, 8.0, 10.0, 12.0]);
        let mut z = Tensor::<f32>::zeros(&[3, 4, 2]);
        z.add_leading(&s);
        assert_eq!(z.data()[10], 10.0);
        assert_eq!(z.data()[1], 0.0);
        assert!(t.slice_leading(&[4, 1, 1]).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_input() {
        let a = Tensor::<f32>::from_fn(&[2, 2, 3, 3], |i| i as f32 * 0.5);
        let b = Tensor::<f32>::from_fn(&[2, 3, 3, 3], |i| -(i as f32));
        let c = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 3, 3]);
        assert_eq!(c.slice_channels(0, 2).unwrap(), a);
        assert_eq!(c.slice_channels(2, 3).unwrap(), b);

        let z = Tensor::concat_channels(&a, &a.zeros_like()).unwrap();
        assert_eq!(z.slice_channels(0, 2).unwrap(), a);

        let bad = Tensor::<f32>::zeros(&[2, 1, 4, 3]);
        assert!(Tensor::concat_channels(&a, &bad).is_err());
    }
}
