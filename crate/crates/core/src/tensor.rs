//! Dense rank-4 tensors in NCHW layout.
//!
//! Storage is generic over [`Scalar`] so the same kernels run in `f32` for
//! training and inference and in `f64` for gradient checking. The default
//! element type is `f32`.

use std::fmt;
use std::ops::AddAssign;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type usable in tensors.
pub trait Scalar: Float + AddAssign + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// `c = op(a) * op(b) + beta * c` on row-major matrices, `op(a)` being
    /// `m x k` and `op(b)` being `k x n`. A transposed operand is stored in
    /// its untransposed layout (`a` as `k x m`) with leading dimension `ld*`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: Mat<'_, Self>,
        b: Mat<'_, Self>,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: Mat<'_, Self>,
                b: Mat<'_, Self>,
                beta: Self,
                c: &mut [Self],
                ldc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = a.strides(m, k);
                let (rsb, csb) = b.strides(k, n);
                assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "gemm output too small");
                // SAFETY: bounds of all three operands are asserted above for the
                // given strides; `c` does not alias `a` or `b` (distinct borrows).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.data.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        ldc as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Borrowed row-major matrix operand for [`Scalar::gemm`].
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub ld: usize,
    pub trans: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], ld: usize) -> Self {
        Mat { data, ld, trans: false }
    }

    pub fn t(data: &'a [T], ld: usize) -> Self {
        Mat { data, ld, trans: true }
    }

    /// Row and column strides of the logical `rows x cols` operand, after
    /// checking that the backing slice covers it.
    fn strides(&self, rows: usize, cols: usize) -> (usize, usize) {
        let (stored_rows, stored_cols) = if self.trans { (cols, rows) } else { (rows, cols) };
        assert!(self.ld >= stored_cols, "gemm leading dimension too small");
        if stored_rows > 0 && stored_cols > 0 {
            assert!(self.data.len() >= (stored_rows - 1) * self.ld + stored_cols, "gemm operand too small");
        }
        if self.trans {
            (1, self.ld)
        } else {
            (self.ld, 1)
        }
    }
}

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Number of elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    /// Element count, or a size error if it would overflow.
    pub fn checked_numel(&self) -> Result<usize> {
        self.0
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(std::mem::size_of::<f64>()).is_some())
            .ok_or_else(|| Error::Size(format!("shape {self} exceeds addressable size")))
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape([self.0[0], c, self.0[2], self.0[3]])
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape([self.0[0], self.0[1], h, w])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "({n},{c},{h},{w})")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape(d)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape([n, c, h, w])
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Shape,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn full(shape: impl Into<Shape>, value: T) -> Result<Self> {
        let shape = shape.into();
        let n = shape.checked_numel()?;
        Ok(Tensor { shape, data: vec![value; n], requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = shape.checked_numel()?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor { shape: self.shape, data: vec![T::zero(); self.data.len()], requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + y) * ws + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// The `(channel)` plane of sample `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    /// Contiguous slice holding all channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.c() * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| g.iter().map(|v| U::of(v.f64())).collect()),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.checked_numel()? != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {} into {shape}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        ensure_same_shape("add", self.shape, other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor { shape: self.shape, data, requires_grad: false, grad: None })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        ensure_same_shape("sub", self.shape, other.shape)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Tensor { shape: self.shape, data, requires_grad: false, grad: None })
    }

    pub fn mul_scalar(&self, s: T) -> Self {
        let data = self.data.iter().map(|&a| a * s).collect();
        Tensor { shape: self.shape, data, requires_grad: false, grad: None }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect(), requires_grad: false, grad: None }
    }

    /// Concatenate along channels, inputs laid out in argument order.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_channels needs at least one input".into()))?
            .shape;
        for p in parts {
            let s = p.shape;
            if s.n() != first.n() || s.h() != first.h() || s.w() != first.w() {
                return Err(Error::Shape(format!("concat_channels: {first} vs {s}")));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.shape.c()).sum();
        let out_shape = first.with_c(c_total);
        let mut data = Vec::with_capacity(out_shape.checked_numel()?);
        for n in 0..first.n() {
            for p in parts {
                data.extend_from_slice(p.sample(n));
            }
        }
        Ok(Tensor { shape: out_shape, data, requires_grad: false, grad: None })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        ensure_same_shape("max_abs_diff", self.shape, other.shape)?;
        Ok(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a.f64() - b.f64()).abs())))
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<f64> {
        ensure_same_shape("dot", self.shape, other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a.f64() * b.f64()).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn ensure_same_shape(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: {a} vs {b}")));
    }
    Ok(())
}

pub(crate) fn ensure_finite<T: Scalar>(op: &str, data: &[T]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{op} produced non-finite value {} at index {i}", data[i])));
    }
    Ok(())
}
