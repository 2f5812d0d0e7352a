//! Dense tensors and the scalar abstraction shared by every layer.
//!
//! Feature maps are stored as [`Tensor4`] in `(batch, channel, height, width)`
//! row-major order. Transformer stages work on [`Tokens`], a `(batch, tokens,
//! embed)` view that remembers the spatial grid it was flattened from.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{ensure, Result};

/// Floating point element type. Implemented for `f32` (training, inference)
/// and `f64` (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Name written into checkpoint indices.
    const DTYPE: &'static str;

    /// # Safety
    /// All pointers must be valid for every index reachable through the
    /// given dimensions and strides.
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

    fn erf(self) -> Self;

    /// Lossless conversion from a literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

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

    fn erf(self) -> f32 {
        libm::erff(self)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

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

    fn erf(self) -> f64 {
        libm::erf(self)
    }
}

/// Strided view of a matrix inside a flat slice: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Debug, Clone, Copy)]
pub struct MatLayout {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatLayout {
    /// Contiguous row-major `rows x cols` block starting at `offset`.
    pub fn row_major(offset: usize, rows: usize, cols: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Same storage read as its transpose.
    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    /// Sub-block of columns `[start, start + count)`.
    pub fn cols(self, start: usize, count: usize) -> Self {
        Self {
            offset: self.offset + start * self.col_stride,
            cols: count,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = alpha * a * b + beta * c` on strided views, bounds-checked.
pub fn gemm<T: Real>(
    alpha: T,
    a: &[T],
    la: MatLayout,
    b: &[T],
    lb: MatLayout,
    beta: T,
    c: &mut [T],
    lc: MatLayout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    assert!(la.cols == 0 || la.last_index() < a.len(), "gemm: a out of bounds");
    assert!(lb.rows == 0 || lb.last_index() < b.len(), "gemm: b out of bounds");
    assert!(lc.last_index() < c.len(), "gemm: c out of bounds");
    // SAFETY: every reachable index was bounds-checked above.
    unsafe {
        T::gemm_raw(
            lc.rows,
            la.cols,
            lc.cols,
            alpha,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn with_c(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub const fn with_hw(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        ensure!(
            shape.n > 0 && shape.c > 0 && shape.h > 0 && shape.w > 0,
            "tensor dimensions must be positive, got {shape}"
        );
        ensure!(
            data.len() == shape.numel(),
            "tensor {shape} needs {} elements, got {}",
            shape.numel(),
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `(c, h, w)` block of one batch element.
    pub fn image(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.plane();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    /// Concatenate along channels, in argument order.
    pub fn concat_channels(parts: &[&Tensor4<T>]) -> Result<Self> {
        ensure!(!parts.is_empty(), "concat of zero tensors");
        let first = parts[0].shape;
        for p in parts {
            ensure!(
                p.shape.n == first.n && p.shape.h == first.h && p.shape.w == first.w,
                "concat: {} incompatible with {}",
                p.shape,
                first
            );
        }
        let c: usize = parts.iter().map(|p| p.shape.c).sum();
        let shape = first.with_c(c);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for p in parts {
                data.extend_from_slice(p.image(n));
            }
        }
        Ok(Self { shape, data })
    }

    /// Inverse of [`Tensor4::concat_channels`].
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        ensure!(
            sizes.iter().sum::<usize>() == self.shape.c,
            "split sizes {sizes:?} do not sum to {} channels",
            self.shape.c
        );
        let plane = self.shape.plane();
        let mut out: Vec<Self> = sizes
            .iter()
            .map(|&c| Self {
                shape: self.shape.with_c(c),
                data: Vec::with_capacity(self.shape.n * c * plane),
            })
            .collect();
        for n in 0..self.shape.n {
            let img = self.image(n);
            let mut start = 0;
            for (part, &c) in out.iter_mut().zip(sizes) {
                part.data
                    .extend_from_slice(&img[start * plane..(start + c) * plane]);
                start += c;
            }
        }
        Ok(out)
    }

    /// Flatten the spatial grid into tokens: `(n, c, h, w) -> (n, h*w, c)`.
    pub fn to_tokens(&self) -> Tokens<T> {
        let Shape4 { n, c, h, w } = self.shape;
        let l = h * w;
        let mut data = vec![T::zero(); n * l * c];
        for b in 0..n {
            let img = self.image(b);
            let out = &mut data[b * l * c..(b + 1) * l * c];
            for ch in 0..c {
                let plane = &img[ch * l..(ch + 1) * l];
                for (t, &v) in plane.iter().enumerate() {
                    out[t * c + ch] = v;
                }
            }
        }
        Tokens {
            n,
            l,
            d: c,
            h,
            w,
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or(U::nan()))
                .collect(),
        }
    }
}

/// Token sequence `(n, l, d)` that remembers its `(h, w)` grid, `l = h * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens<T> {
    pub n: usize,
    pub l: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tokens<T> {
    pub fn zeros(n: usize, h: usize, w: usize, d: usize) -> Self {
        Self {
            n,
            l: h * w,
            d,
            h,
            w,
            data: vec![T::zero(); n * h * w * d],
        }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, d: usize, data: Vec<T>) -> Result<Self> {
        ensure!(
            n > 0 && h > 0 && w > 0 && d > 0,
            "token tensor dimensions must be positive"
        );
        ensure!(
            data.len() == n * h * w * d,
            "tokens ({n}, {h}x{w}, {d}) need {} elements, got {}",
            n * h * w * d,
            data.len()
        );
        Ok(Self {
            n,
            l: h * w,
            d,
            h,
            w,
            data,
        })
    }

    /// Validates `l == h * w` and the storage length.
    pub fn check(&self) -> Result<()> {
        ensure!(
            self.l == self.h * self.w,
            "token count {} does not match spatial grid {}x{}",
            self.l,
            self.h,
            self.w
        );
        ensure!(
            self.data.len() == self.n * self.l * self.d,
            "token storage length {} does not match shape",
            self.data.len()
        );
        Ok(())
    }

    /// Rows of the flattened `(n * l, d)` matrix.
    #[inline]
    pub fn rows(&self) -> usize {
        self.n * self.l
    }

    pub fn with_data(&self, d: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), self.n * self.l * d);
        Self {
            n: self.n,
            l: self.l,
            d,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn to_tensor4(&self) -> Tensor4<T> {
        let (n, l, d) = (self.n, self.l, self.d);
        let shape = Shape4::new(n, d, self.h, self.w);
        let mut data = vec![T::zero(); shape.numel()];
        for b in 0..n {
            let src = &self.data[b * l * d..(b + 1) * l * d];
            let dst = &mut data[b * l * d..(b + 1) * l * d];
            for t in 0..l {
                for c in 0..d {
                    dst[c * l + t] = src[t * d + c];
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.data.len(), other.data.len(), "token add shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
