//! Dense tensors and the numerical primitives the rest of the crate composes.
//!
//! Every primitive comes as a forward function plus an explicit
//! vector-Jacobian product (`*_vjp`). There is no autograd graph: callers
//! keep whatever forward inputs they need and hand them back to the vjp.

mod conv;
pub mod gradcheck;
mod ops;

use std::fmt;

use thiserror::Error;

pub use conv::{dense_conv2d, dense_conv2d_vjp, depthwise_conv2d, depthwise_conv2d_vjp};
pub use ops::{
    add_channel_bias, add_channel_bias_vjp, gelu, gelu_vjp, global_avg_pool, global_avg_pool_vjp,
    layer_norm, layer_norm_vjp, nchw_to_nhwc, nhwc_to_nchw, pointwise_linear,
    pointwise_linear_vjp, scale_channels, scale_channels_vjp, LayerNormGrads, LinearGrads,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: invalid geometry: {detail}")]
    InvalidGeometry { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch { op, detail: detail.into() }
}

/// Floating point element type. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
pub trait Real:
    num_traits::Float
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// `c = alpha * a * b + beta * c` on strided matrices.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices of the given
    /// dimensions; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    unsafe fn gemm_raw(
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

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    unsafe fn gemm_raw(
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

/// Row-major matrix product into `c` (m×n).
///
/// `a` is m×k (stored k×m when `trans_a`), `b` is k×n (stored n×k when
/// `trans_b`). With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    c: &mut [T],
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "matmul: lhs length");
    assert_eq!(b.len(), k * n, "matmul: rhs length");
    assert_eq!(c.len(), m * n, "matmul: output length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths were checked above and the strides address exactly
    // the m×k, k×n and m×n row-major (or transposed) buffers.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Dense row-major array with shape metadata.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self { shape, data: vec![value; len] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let len = shape.iter().product();
        Self { shape, data: (0..len).map(&mut f).collect() }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
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

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shapes differ");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Interpret as N×C×H×W.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(shape_err(op, format!("expected 4-d tensor, got {:?}", self.shape))),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }
}

/// Kernel size, stride, zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_h: pad.0,
            pad_w: pad.1,
            groups: 1,
        }
    }

    /// Square kernel, unit stride, "same" padding.
    pub fn same(kernel: usize) -> Self {
        Self::new((kernel, kernel), (1, 1), (kernel / 2, kernel / 2))
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// `floor((in + 2·pad − kernel) / stride) + 1` on both axes.
    pub fn output_extent(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        const OP: &str = "conv geometry";
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(TensorError::InvalidGeometry { op: OP, detail: "kernel extent must be positive".into() });
        }
        if self.stride_h == 0 || self.stride_w == 0 {
            return Err(TensorError::InvalidGeometry { op: OP, detail: "stride must be at least 1".into() });
        }
        if self.groups == 0 {
            return Err(TensorError::InvalidGeometry { op: OP, detail: "groups must be at least 1".into() });
        }
        let axis = |input: usize, pad: usize, kernel: usize, stride: usize| {
            let padded = input + 2 * pad;
            if padded < kernel {
                None
            } else {
                Some((padded - kernel) / stride + 1)
            }
        };
        match (
            axis(in_h, self.pad_h, self.kernel_h, self.stride_h),
            axis(in_w, self.pad_w, self.kernel_w, self.stride_w),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(TensorError::InvalidGeometry {
                op: OP,
                detail: format!(
                    "non-positive output extent for input {in_h}x{in_w}, kernel {}x{}, pad {}x{}",
                    self.kernel_h, self.kernel_w, self.pad_h, self.pad_w
                ),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(matches!(
            Tensor::<f32>::new([2, 3], vec![0.0; 5]),
            Err(TensorError::DataLength { .. })
        ));
    }

    #[test]
    fn stem_geometry_extent() {
        let g = ConvGeometry::new((2, 16), (2, 16), (0, 0));
        assert_eq!(g.output_extent(128, 1001).unwrap(), (64, 62));
    }

    #[test]
    fn geometry_formula_exhaustive() {
        for input in 1..=8 {
            for kernel in 1..=8 {
                for stride in 1..=4 {
                    for pad in 0..=3 {
                        let g = ConvGeometry::new((kernel, kernel), (stride, stride), (pad, pad));
                        let padded = input as i64 + 2 * pad as i64;
                        match g.output_extent(input, input) {
                            Ok((h, w)) => {
                                let expect = (padded - kernel as i64) / stride as i64 + 1;
                                assert!(expect >= 1);
                                assert_eq!(h as i64, expect);
                                assert_eq!(w as i64, expect);
                            }
                            Err(_) => assert!(padded < kernel as i64),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(&mut c, &a, &b, 2, 2, 2, false, false, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(&mut c, &a, &b, 2, 2, 2, true, false, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(&mut c, &a, &b, 2, 2, 2, false, true, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        matmul(&mut c, &a, &b, 2, 2, 2, false, true, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }
}
