use std::fmt;

use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Ordered list of positive extents. Video tensors use the axis order
/// `b, n_s, c, h, w`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            bail!(Shape, "shape must have at least one axis");
        }
        if let Some(d) = dims.iter().position(|&d| d == 0) {
            bail!(Shape, "extent {d} of {dims:?} is zero");
        }
        let mut n: usize = 1;
        for &d in &dims {
            n = match n.checked_mul(d) {
                Some(n) => n,
                None => bail!(Size, "element count of {dims:?} overflows usize"),
            };
        }
        if n > isize::MAX as usize {
            bail!(
                Size,
                "element count of {dims:?} exceeds the addressable range"
            );
        }
        Ok(Self(dims))
    }

    pub fn video(b: usize, n_s: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(vec![b, n_s, c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.0[i + 1];
        }
        s
    }

    /// Interprets the shape as a video and returns `(b, n_s, c, h, w)`.
    pub fn as_video(&self) -> Result<(usize, usize, usize, usize, usize)> {
        match self.0[..] {
            [b, n, c, h, w] => Ok((b, n, c, h, w)),
            _ => bail!(Shape, "expected a 5-axis video shape, got {:?}", self.0),
        }
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Dense, contiguous, row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        let n = shape.numel();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            bail!(
                Shape,
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            );
        }
        Ok(Self { shape, data })
    }

    /// Convenience constructor from raw dims.
    pub fn from_dims(dims: &[usize], data: Vec<T>) -> Result<Self> {
        Self::from_vec(Shape::new(dims.to_vec())?, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn elementwise(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        if self.shape != other.shape {
            bail!(
                Shape,
                "elementwise {:?} of {:?} and {:?}",
                op,
                self.shape,
                other.shape
            );
        }
        let f = match op {
            BinaryOp::Add => |a: T, b: T| a + b,
            BinaryOp::Sub => |a: T, b: T| a - b,
            BinaryOp::Mul => |a: T, b: T| a * b,
        };
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, BinaryOp::Mul)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    /// `self += k * other`, in place.
    pub fn axpy(&mut self, k: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            bail!(Shape, "axpy of {:?} and {:?}", self.shape, other.shape);
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// Reduces over `axes`, dropping them. Reducing every axis yields shape `[1]`.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize]) -> Result<Self> {
        let dims = self.dims();
        let nd = dims.len();
        let mut reduced = vec![false; nd];
        for &a in axes {
            if a >= nd {
                bail!(Shape, "reduce axis {a} out of range for {:?}", self.shape);
            }
            reduced[a] = true;
        }
        let out_dims: Vec<usize> = (0..nd).filter(|&i| !reduced[i]).map(|i| dims[i]).collect();
        let out_shape = if out_dims.is_empty() {
            Shape::new(vec![1])?
        } else {
            Shape::new(out_dims)?
        };
        let out_strides = out_shape.strides();
        let mut out_stride_for_axis = vec![0usize; nd];
        let mut k = 0;
        for i in 0..nd {
            if !reduced[i] {
                out_stride_for_axis[i] = out_strides[k];
                k += 1;
            }
        }
        let init = match op {
            ReduceOp::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut out = vec![init; out_shape.numel()];
        let mut idx = vec![0usize; nd];
        for &v in &self.data {
            let o: usize = idx
                .iter()
                .zip(&out_stride_for_axis)
                .map(|(i, s)| i * s)
                .sum();
            match op {
                ReduceOp::Max => {
                    if v > out[o] {
                        out[o] = v
                    }
                }
                _ => out[o] += v,
            }
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        if op == ReduceOp::Mean {
            let count: usize = axes.iter().map(|&a| dims[a]).product();
            let inv = T::one() / T::c(count as f64);
            for v in &mut out {
                *v *= inv;
            }
        }
        Tensor::from_vec(out_shape, out)
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (&[m, k], &[k2, n]) = (self.dims(), other.dims()) else {
            bail!(
                Shape,
                "matmul needs 2-D operands, got {:?} and {:?}",
                self.shape,
                other.shape
            );
        };
        if k != k2 {
            bail!(Shape, "matmul inner extents {k} and {k2} differ");
        }
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Tensor::from_dims(&[m, n], out)
    }

    /// Copies frame `frame` of video item `item` into a `1 × 1 × c × h × w` tensor.
    pub fn video_frame(&self, item: usize, frame: usize) -> Result<Self> {
        let (b, n, c, h, w) = self.shape.as_video()?;
        if item >= b || frame >= n {
            bail!(
                Shape,
                "frame ({item}, {frame}) out of range for {:?}",
                self.shape
            );
        }
        let fsz = c * h * w;
        let start = (item * n + frame) * fsz;
        Tensor::from_vec(
            Shape::video(1, 1, c, h, w)?,
            self.data[start..start + fsz].to_vec(),
        )
    }

    /// Copies batch item `item` into a `1 × n_s × c × h × w` tensor.
    pub fn video_item(&self, item: usize) -> Result<Self> {
        let (b, n, c, h, w) = self.shape.as_video()?;
        if item >= b {
            bail!(Shape, "item {item} out of range for {:?}", self.shape);
        }
        let isz = n * c * h * w;
        Tensor::from_vec(
            Shape::video(1, n, c, h, w)?,
            self.data[item * isz..(item + 1) * isz].to_vec(),
        )
    }

    /// Concatenates tensors along axis 0; all trailing extents must agree.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let Some(first) = parts.first() else {
            bail!(Shape, "cannot concatenate an empty list");
        };
        let tail = &first.dims()[1..];
        let mut b = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims()[1..] != tail {
                bail!(Shape, "concat of {:?} and {:?}", first.shape, p.shape);
            }
            b += p.dims()[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![b];
        dims.extend_from_slice(tail);
        Tensor::from_dims(&dims, data)
    }
}

/// Pairwise summation in a fixed order; the result depends only on the input
/// sequence, never on thread count.
pub fn pairwise_sum<T: Scalar>(xs: &[T]) -> T {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut s = T::zero();
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}
