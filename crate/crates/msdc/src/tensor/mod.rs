//! Dense tensors and reverse-mode differentiation.
//!
//! Everything is CPU, row-major, and precision-generic over [`Element`]
//! (`f32` for training, `f64` for gradient checking). The autograd lives in
//! [`tape`]: operations append nodes to a [`Tape`] and `Tape::backward`
//! replays them in reverse.

mod conv;
mod gradcheck;
mod ops;
mod tape;

pub use conv::{conv_output_extent, transpose_output_extent, ConvGeom};
pub use gradcheck::{grad_check, grad_check_value, GradCheckEntry, GradCheckReport, FD_STEP};
pub use tape::{BnPhase, Gradients, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM};

use std::fmt;

use crate::error::{Error, Result};

/// Scalar element of a [`Tensor`]: 32- or 64-bit IEEE-754 real.
pub trait Element:
    num_traits::Float
    + Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Row-major matrix product `c = alpha * a @ b + beta * c` with explicit
    /// strides, delegating to a cache-tiled kernel.
    ///
    /// # Safety
    /// Pointers must be valid for the `m x k`, `k x n`, `m x n` accesses the
    /// given strides imply.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense n-dimensional array with row-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor, checking that the data length matches the shape.
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::invalid(format!(
                "tensor shape {:?} has a zero extent",
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
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

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret the same storage under a new shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at multi-index `coords`.
    pub fn at(&self, coords: &[usize]) -> E {
        self.data[flat_index(&self.shape, coords)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a tensor of the same shape.
    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Convert elementwise into another precision.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.as_f64())).collect(),
        }
    }

    /// Split into parts along `axis`; `sizes` must sum to the axis extent.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<E>>> {
        if axis >= self.rank() {
            return Err(Error::invalid(format!(
                "split axis {} out of range for rank {}",
                axis,
                self.rank()
            )));
        }
        if sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::invalid(format!(
                "split sizes {:?} do not sum to axis extent {}",
                sizes, self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let axis_extent = self.shape[axis];
        let mut parts = Vec::with_capacity(sizes.len());
        let mut offset = 0usize;
        for &sz in sizes {
            let mut shape = self.shape.clone();
            shape[axis] = sz;
            let mut data = Vec::with_capacity(outer * sz * inner);
            for o in 0..outer {
                let base = (o * axis_extent + offset) * inner;
                data.extend_from_slice(&self.data[base..base + sz * inner]);
            }
            parts.push(Tensor { shape, data });
            offset += sz;
        }
        Ok(parts)
    }

    /// In-place `self += other` (same shape).
    pub fn add_assign(&mut self, other: &Tensor<E>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: E) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// Flat row-major offset of `coords` within `shape`.
pub fn flat_index(shape: &[usize], coords: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), coords.len());
    let mut idx = 0usize;
    for (e, c) in shape.iter().zip(coords) {
        debug_assert!(c < e);
        idx = idx * e + c;
    }
    idx
}
