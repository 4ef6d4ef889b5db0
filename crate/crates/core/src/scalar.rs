//! Scalar abstraction shared by every numeric module.
//!
//! Model math is written once against [`Scalar`] and monomorphized for
//! `f32` (training) and `f64` (oracles and gradient checks). The trait adds
//! a strided GEMM entry point on top of `num_traits::Float` so matmul-heavy
//! kernels can use an optimized backend while the rest of the code stays
//! generic.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type tag used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

/// Strided read-only view into a row-major buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Dense row-major `rows x cols` view starting at element 0.
    pub fn dense(data: &'a [T], cols: usize) -> Self {
        Self { data, offset: 0, row_stride: cols, col_stride: 1 }
    }

    /// Transposed view of a dense row-major matrix with `cols` columns.
    pub fn dense_t(data: &'a [T], cols: usize) -> Self {
        Self { data, offset: 0, row_stride: 1, col_stride: cols }
    }

    pub fn at(self, offset: usize) -> Self {
        Self { offset: self.offset + offset, ..self }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "strided view out of bounds");
    }
}

/// Strided mutable view into a row-major buffer.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], cols: usize) -> Self {
        Self { data, offset: 0, row_stride: cols, col_stride: 1 }
    }

    pub fn at(self, offset: usize) -> Self {
        Self { offset: self.offset + offset, ..self }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < self.data.len(), "strided view out of bounds");
    }
}

/// Floating point element type for tensors.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a·b + beta * c` for an `m x k` by `k x n` product.
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: MatMut<'_, Self>,
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// Lossy conversion from `f64`; every literal in the crate goes through here.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

/// Bounds-checked GEMM over strided views.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: MatMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    c.check(m, n);
    T::gemm_raw(m, k, n, alpha, a, b, beta, c);
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $kernel:ident, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: MatMut<'_, Self>,
            ) {
                if k == 0 {
                    // matrixmultiply leaves c untouched for k == 0; scale explicitly.
                    for i in 0..m {
                        for j in 0..n {
                            let idx = c.offset + i * c.row_stride + j * c.col_stride;
                            c.data[idx] = if beta == 0.0 { 0.0 } else { beta * c.data[idx] };
                        }
                    }
                    return;
                }
                // SAFETY: every view was bounds-checked by `gemm` for the
                // exact extents and strides passed here, and `c` is a unique
                // borrow that cannot alias `a` or `b`.
                unsafe {
                    matrixmultiply::$kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.data.as_ptr().add(a.offset),
                        a.row_stride as isize,
                        a.col_stride as isize,
                        b.data.as_ptr().add(b.offset),
                        b.row_stride as isize,
                        b.col_stride as isize,
                        beta,
                        c.data.as_mut_ptr().add(c.offset),
                        c.row_stride as isize,
                        c.col_stride as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, sgemm, 4);
impl_scalar!(f64, DType::F64, dgemm, 8);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_gemm_handles_transposed_operands() {
        // a = [[1,2],[3,4]], b stored transposed: b = [[1,1],[0,1]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let bt = [1.0f64, 0.0, 1.0, 1.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, 1.0, MatRef::dense(&a, 2), MatRef::dense_t(&bt, 2), 0.0, MatMut::dense(&mut c, 2));
        assert_eq!(c, [1.0, 3.0, 3.0, 7.0]);
    }

    #[test]
    fn zero_inner_dimension_clears_output() {
        let mut c = [5.0f32; 4];
        gemm::<f32>(2, 0, 2, 1.0, MatRef::dense(&[], 0), MatRef::dense(&[], 2), 0.0, MatMut::dense(&mut c, 2));
        assert_eq!(c, [0.0; 4]);
    }
}
