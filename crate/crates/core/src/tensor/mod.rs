//! Dense row-major tensors, a tape-based reverse-mode autodiff graph and the
//! Adam optimizer. Everything is generic over [`Scalar`] so the same kernels
//! run in `f32` for training and in `f64` for gradient checking.

mod gemm;
mod graph;
mod ops;
mod optim;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub use graph::{BnMode, Gradients, Graph, StatUpdate, Var};
pub use optim::{Adam, ParamId, ParamStore, Parameter};

/// Floating point element type of a tensor.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary (row, column) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits in scalar type")
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_strides: (isize, isize),
        b: &[f32],
        b_strides: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        gemm::sgemm(m, k, n, a, a_strides, b, b_strides, beta, c)
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_strides: (isize, isize),
        b: &[f64],
        b_strides: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        gemm::dgemm(m, k, n, a, a_strides, b, b_strides, beta, c)
    }
}

/// An n-dimensional row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape("tensor", "element count", len, data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape("reshape", "element count", self.data.len(), len));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(op, "rank", 4, self.shape.len())),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Returns sample `n` of the leading axis as its own tensor with a leading extent of 1.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        let per: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}
