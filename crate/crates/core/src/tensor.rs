//! Dense row-major tensors and the numeric kernels the layers are built on.
//!
//! Images are laid out channels-first, `(C, H, W)`, flattened row-major:
//! element `(c, y, x)` lives at `(c * H + y) * W + x`. Checkpoints and the
//! flatten layer rely on this order.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type usable by tensors and layers.
///
/// Training runs in `f32`; gradient checks run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Copy
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c <- alpha * a.b + beta * c` on strided row/column-major operands.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices; `c` must not alias `a` or `b`.
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

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Whether a GEMM operand is used as stored or transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Op {
    N,
    T,
}

/// `c <- op(a).op(b) + beta * c` on contiguous row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
const LANES: usize = 16;

/// Inner product with independent partial sums, so it vectorises.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

/// `y += alpha * x`.
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths checked above; `c` is a distinct mutable borrow.
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

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::dim("tensor shape must have at least one extent"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(Error::dim(format!(
            "extent {pos} of shape {shape:?} is zero"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for untrusted input.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape(shape).expect("valid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape(shape).expect("valid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    /// Same data under a new shape with an equal element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn dot(&self, other: &Self) -> T {
        dot(&self.data, &other.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "cannot add {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Matrix product of `m x k` and `k x n` tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => return Err(Error::dim(format!("matmul lhs must be 2-D, got {:?}", a.shape()))),
    };
    let (k2, n) = match *b.shape() {
        [k2, n] => (k2, n),
        _ => return Err(Error::dim(format!("matmul rhs must be 2-D, got {:?}", b.shape()))),
    };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), Op::N, b.data(), Op::N, T::zero(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Shape bookkeeping shared by [`im2col`] and [`col2im`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let (channels, height, width) = input;
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim(format!("empty input {input:?}")));
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim(format!(
                "kernel {kernel:?} and stride {stride:?} must be positive"
            )));
        }
        let padded = (height + 2 * padding.0, width + 2 * padding.1);
        if kernel.0 > padded.0 || kernel.1 > padded.1 {
            return Err(Error::dim(format!(
                "kernel {kernel:?} larger than padded input {padded:?}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_height: (padded.0 - kernel.0) / stride.0 + 1,
            out_width: (padded.1 - kernel.1) / stride.1 + 1,
        })
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Rows of the column matrix: `C * kh * kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    /// Columns of the column matrix: one per output position.
    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.channels, self.height, self.width] {
            return Err(Error::dim(format!(
                "input {shape:?} does not match geometry {:?}",
                [self.channels, self.height, self.width]
            )));
        }
        Ok(())
    }
}

/// Input row feeding output row `o` through kernel offset `k`, if inside the image.
#[inline]
fn source_index(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < extent)
}

pub(crate) fn im2col_into<T: Real>(input: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (ho, wo) = (g.out_height, g.out_width);
    let plane = g.height * g.width;
    debug_assert_eq!(cols.len(), g.col_rows() * ho * wo);
    let mut row = 0;
    for c in 0..g.channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    match source_index(oy, ki, g.stride.0, g.padding.0, g.height) {
                        None => out_row.fill(T::zero()),
                        Some(iy) => {
                            let line = &src[iy * g.width..(iy + 1) * g.width];
                            for (ox, v) in out_row.iter_mut().enumerate() {
                                *v = match source_index(ox, kj, g.stride.1, g.padding.1, g.width) {
                                    Some(ix) => line[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn col2im_into<T: Real>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (kh, kw) = g.kernel;
    let (ho, wo) = (g.out_height, g.out_width);
    let plane = g.height * g.width;
    out.fill(T::zero());
    let mut row = 0;
    for c in 0..g.channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let Some(iy) = source_index(oy, ki, g.stride.0, g.padding.0, g.height) else {
                        continue;
                    };
                    let line = &mut dst[iy * g.width..(iy + 1) * g.width];
                    for (ox, &v) in src[oy * wo..(oy + 1) * wo].iter().enumerate() {
                        if let Some(ix) = source_index(ox, kj, g.stride.1, g.padding.1, g.width) {
                            line[ix] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Unfolds every receptive field of a `C x H x W` input into one column.
pub fn im2col<T: Real>(input: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    g.check_input(input.shape())?;
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    im2col_into(input.data(), g, &mut cols);
    Tensor::new(vec![g.col_rows(), g.col_cols()], cols)
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im<T: Real>(cols: &Tensor<T>, g: &ConvGeometry) -> Result<Tensor<T>> {
    if cols.shape() != [g.col_rows(), g.col_cols()] {
        return Err(Error::dim(format!(
            "columns {:?} do not match geometry {:?}",
            cols.shape(),
            [g.col_rows(), g.col_cols()]
        )));
    }
    let mut out = vec![T::zero(); g.input_len()];
    col2im_into(cols.data(), g, &mut out);
    Tensor::new(vec![g.channels, g.height, g.width], out)
}
