//! Dense n-dimensional tensors over f32/f64.
//!
//! Training runs in single precision; gradient-check tests instantiate the
//! same code in double precision, so everything numeric is generic over
//! [`Scalar`].

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type with a GEMM kernel.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// C <- alpha * A(m x k) * B(k x n) + beta * C with explicit row/col
    /// strides, so transposed operands cost nothing.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: Self,
        a: &[Self], rsa: isize, csa: isize,
        b: &[Self], rsb: isize, csb: isize,
        beta: Self,
        c: &mut [Self], rsc: isize, csc: isize,
    );

    /// Contiguous row-major convenience wrapper.
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: &[Self], b: &[Self], beta: Self, c: &mut [Self]) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        Self::gemm_strided(
            m, k, n, alpha,
            a, k as isize, 1,
            b, n as isize, 1,
            beta,
            c, n as isize, 1,
        );
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: f32,
        a: &[f32], rsa: isize, csa: isize,
        b: &[f32], rsb: isize, csb: isize,
        beta: f32,
        c: &mut [f32], rsc: isize, csc: isize,
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm_strided(
        m: usize, k: usize, n: usize, alpha: f64,
        a: &[f64], rsa: isize, csa: isize,
        b: &[f64], rsb: isize, csb: isize,
        beta: f64,
        c: &mut [f64], rsc: isize, csc: isize,
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha,
                a.as_ptr(), rsa, csa,
                b.as_ptr(), rsb, csb,
                beta,
                c.as_mut_ptr(), rsc, csc,
            );
        }
    }
}

/// Dense tensor, row-major (NCHW for images).
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::usage("tensor shape must have positive dimensions"));
        }
        if numel != data.len() {
            return Err(Error::usage(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Gaussian init, mean 0 / std `std`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: S, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                S::from_f64(v) * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Same data, new shape (element count must match).
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::usage(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Tensor<S> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64())
            .fold(0.0, f64::max)
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| Scalar::to_f64(v) as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| Scalar::to_f64(v)).collect() }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// Relative error used by gradient checks:
/// |a - b| / (|a| + |b| + 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-8)
}
