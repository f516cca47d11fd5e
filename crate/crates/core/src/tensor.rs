//! Dense row-major tensors of rank 1 to 4.
//!
//! Storage is generic over [`Scalar`], which is implemented for `f32`
//! (training) and `f64` (gradient checking). Both go through the same code
//! paths, so a 64-bit network is an exact stand-in for the 32-bit one.

use std::fmt;

use num_traits::{Float, FromPrimitive};
use thiserror::Error;

/// Errors raised by tensor construction and the layer primitives.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor rank must be between 1 and 4, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("{op}: {detail}")]
    Mismatch { op: &'static str, detail: String },
}

impl ShapeError {
    pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> Self {
        ShapeError::Mismatch {
            op,
            detail: detail.into(),
        }
    }
}

/// Floating-point element type usable by the numeric core.
pub trait Scalar: Float + FromPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + 'static {
    /// `c = a * b + (accumulate ? c : 0)` for row-major `a: m×k`, `b: k×n`.
    ///
    /// `a_t` / `b_t` mean the stored buffer is the transpose (`k×m` / `n×k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

fn gemm_strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // logical (rows × cols); buffer is row-major of the logical or its transpose
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_t);
                let (rsb, csb) = gemm_strides(k, n, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every strided access
                // stays inside the three slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense tensor with an explicit shape and row-major storage.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if self.data.len() <= PREVIEW {
            s.field("data", &self.data);
        } else {
            s.field("data", &format_args!("{:?}..", &self.data[..PREVIEW]));
        }
        s.finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize, ShapeError> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(ShapeError::Rank(shape.to_vec()));
    }
    if shape.contains(&0) {
        return Err(ShapeError::ZeroDim(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self, ShapeError> {
        let expected = check_shape(shape)?;
        if expected != data.len() {
            return Err(ShapeError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, ShapeError> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self, ShapeError> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self, ShapeError> {
        let n = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[T]) -> Result<Self, ShapeError> {
        Self::new(&[values.len()], values.to_vec())
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self, ShapeError> {
        Self::new(shape, self.data)
    }

    pub fn zeros_like(&self) -> Self {
        Self::from_parts_unchecked(self.shape.clone(), vec![T::zero(); self.data.len()])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    /// Element-wise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts_unchecked(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    /// `self += other`; shapes must agree.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), ShapeError> {
        self.expect_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v = *v * factor;
        }
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<(), ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::mismatch(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, what: &str, rank: usize) -> Result<(), ShapeError> {
        if self.rank() != rank {
            return Err(ShapeError::mismatch(
                op,
                format!("{what} must have rank {rank}, got shape {:?}", self.shape),
            ));
        }
        Ok(())
    }
}
