use crate::blocks::param::{visit_fields, Init, Param};
use crate::error::{ensure, Error, Result};
use crate::tensor::{gemm, MatLayout, Real, Shape4, Tensor4};

/// Upper bound on the im2col scratch buffer, in elements. Output rows are
/// processed in chunks that fit.
const COL_CHUNK: usize = 1 << 20;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, no padding, one group, with bias.
    pub const fn new(in_c: usize, out_c: usize, kernel: usize) -> Self {
        Self {
            in_c,
            out_c,
            kernel,
            stride: 1,
            pad: 0,
            groups: 1,
            bias: true,
        }
    }

    pub const fn stride(self, stride: usize) -> Self {
        Self { stride, ..self }
    }

    pub const fn pad(self, pad: usize) -> Self {
        Self { pad, ..self }
    }

    pub const fn groups(self, groups: usize) -> Self {
        Self { groups, ..self }
    }

    pub const fn no_bias(self) -> Self {
        Self { bias: false, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.in_c > 0 && self.out_c > 0 && self.kernel > 0 && self.stride > 0,
            "convolution dimensions must be positive: {self:?}"
        );
        ensure!(
            self.groups > 0 && self.in_c % self.groups == 0 && self.out_c % self.groups == 0,
            "groups {} must divide in_c {} and out_c {}",
            self.groups,
            self.in_c,
            self.out_c
        );
        Ok(())
    }

    /// Output spatial size: `floor((h + 2 pad - kernel) / stride) + 1`.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        ensure!(
            h + 2 * self.pad >= self.kernel && w + 2 * self.pad >= self.kernel,
            "input {h}x{w} smaller than kernel {} with padding {}",
            self.kernel,
            self.pad
        );
        Ok((
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        ))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_c, self.in_c / self.groups, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_c } else { 0 }
    }

    /// `out_h * out_w * out_c * in_c * k^2 / groups` per image.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        (out_h * out_w * self.out_c) as u64
            * (self.in_c / self.groups * self.kernel * self.kernel) as u64
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// 2-D convolution over `(n, c, h, w)` tensors.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    spec: ConvSpec,
    cache: Option<Tensor4<T>>,
}

visit_fields!(Conv2d { weight, bias });

impl<T: Real> Conv2d<T> {
    pub fn new(spec: ConvSpec, init: &mut Init) -> Result<Self> {
        spec.validate()?;
        let weight = init.trunc_normal(&spec.weight_shape());
        let bias = spec.bias.then(|| init.zeros(&[spec.out_c]));
        Ok(Self {
            weight,
            bias,
            spec,
            cache: None,
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    fn out_shape(&self, x: Shape4) -> Result<Shape4> {
        ensure!(
            x.c == self.spec.in_c,
            "convolution expects {} input channels, got {}",
            self.spec.in_c,
            x.c
        );
        let (oh, ow) = self.spec.out_hw(x.h, x.w)?;
        Ok(Shape4::new(x.n, self.spec.out_c, oh, ow))
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let out_shape = self.out_shape(x.shape())?;
        let mut out = Tensor4::zeros(out_shape);
        let geo = Geometry::new(&self.spec, x.shape(), out_shape);
        let mut col = Vec::new();
        for n in 0..x.shape().n {
            let src = x.image(n);
            let dst = out.image_mut(n);
            for g in 0..self.spec.groups {
                geo.forward_group(&self.weight.value, src, dst, g, &mut col);
            }
            if let Some(b) = &self.bias {
                let plane = out_shape.plane();
                for (co, &bv) in b.value.iter().enumerate() {
                    dst[co * plane..(co + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
        Ok(out)
    }

    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self.forward(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = self.cache.take().ok_or(Error::NoCache("conv2d"))?;
        let out_shape = self.out_shape(x.shape())?;
        ensure!(
            dy.shape() == out_shape,
            "conv2d backward: gradient {} does not match output {}",
            dy.shape(),
            out_shape
        );
        let geo = Geometry::new(&self.spec, x.shape(), out_shape);
        let mut dx = Tensor4::zeros(x.shape());
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        if let Some(b) = &mut self.bias {
            let plane = out_shape.plane();
            let g = b.grad_mut();
            for n in 0..out_shape.n {
                let img = dy.image(n);
                for (co, gv) in g.iter_mut().enumerate() {
                    *gv += img[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
                }
            }
        }
        let (w, wgrad) = self.weight.value_and_grad();
        for n in 0..out_shape.n {
            let src = x.image(n);
            let dimg = dy.image(n);
            let dsrc = dx.image_mut(n);
            for g in 0..self.spec.groups {
                geo.backward_group(w, wgrad, src, dimg, dsrc, g, &mut col, &mut dcol);
            }
        }
        Ok(dx)
    }
}

/// Per-call constants of one convolution application.
struct Geometry {
    spec: ConvSpec,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    cig: usize,
    cog: usize,
    k_len: usize,
    rows_per_chunk: usize,
}

impl Geometry {
    fn new(spec: &ConvSpec, x: Shape4, out: Shape4) -> Self {
        let cig = spec.in_c / spec.groups;
        let cog = spec.out_c / spec.groups;
        let k_len = cig * spec.kernel * spec.kernel;
        let rows_per_chunk = (COL_CHUNK / (k_len * out.w).max(1)).clamp(1, out.h);
        Self {
            spec: *spec,
            h: x.h,
            w: x.w,
            oh: out.h,
            ow: out.w,
            cig,
            cog,
            k_len,
            rows_per_chunk,
        }
    }

    fn weight_layout(&self, g: usize) -> MatLayout {
        MatLayout::row_major(g * self.cog * self.k_len, self.cog, self.k_len)
    }

    /// Output (or output-gradient) rows `[r0, r1)` of group `g`.
    fn out_layout(&self, g: usize, r0: usize, r1: usize) -> MatLayout {
        MatLayout {
            offset: g * self.cog * self.oh * self.ow + r0 * self.ow,
            rows: self.cog,
            cols: (r1 - r0) * self.ow,
            row_stride: self.oh * self.ow,
            col_stride: 1,
        }
    }

    fn input_layout(&self, g: usize) -> MatLayout {
        MatLayout::row_major(g * self.cig * self.h * self.w, self.cig, self.h * self.w)
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.oh)
            .step_by(self.rows_per_chunk)
            .map(|r0| (r0, (r0 + self.rows_per_chunk).min(self.oh)))
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.spec.stride;
        let p = self.spec.pad;
        let lo = if p > kx { (p - kx).div_ceil(s) } else { 0 };
        let hi = if self.w + p > kx {
            (self.w + p - kx).div_ceil(s).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, src: &[T], g: usize, r0: usize, r1: usize, col: &mut Vec<T>) {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let p = self.spec.pad;
        let cols = (r1 - r0) * self.ow;
        col.clear();
        col.resize(self.k_len * cols, T::zero());
        let plane_len = self.h * self.w;
        for ci in 0..self.cig {
            let plane = &src[(g * self.cig + ci) * plane_len..][..plane_len];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.col_range(kx);
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= self.h || lo >= hi {
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..][..self.w];
                        let drow = &mut dst[ri * self.ow..(ri + 1) * self.ow];
                        let ix0 = lo * s + kx - p;
                        if s == 1 {
                            drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, ox) in (lo..hi).enumerate() {
                                drow[ox] = srow[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, dcol: &[T], g: usize, r0: usize, r1: usize, dsrc: &mut [T]) {
        let k = self.spec.kernel;
        let s = self.spec.stride;
        let p = self.spec.pad;
        let cols = (r1 - r0) * self.ow;
        let plane_len = self.h * self.w;
        for ci in 0..self.cig {
            let plane = &mut dsrc[(g * self.cig + ci) * plane_len..][..plane_len];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcol[row * cols..(row + 1) * cols];
                    let (lo, hi) = self.col_range(kx);
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy as usize >= self.h || lo >= hi {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..][..self.w];
                        let srow = &src[ri * self.ow..(ri + 1) * self.ow];
                        let ix0 = lo * s + kx - p;
                        for (j, ox) in (lo..hi).enumerate() {
                            drow[ix0 + j * s] += srow[ox];
                        }
                    }
                }
            }
        }
    }

    fn forward_group<T: Real>(
        &self,
        weight: &[T],
        src: &[T],
        dst: &mut [T],
        g: usize,
        col: &mut Vec<T>,
    ) {
        if self.spec.is_pointwise() {
            gemm(
                T::one(),
                weight,
                self.weight_layout(g),
                src,
                self.input_layout(g),
                T::zero(),
                dst,
                self.out_layout(g, 0, self.oh),
            );
            return;
        }
        for (r0, r1) in self.chunks() {
            self.im2col(src, g, r0, r1, col);
            gemm(
                T::one(),
                weight,
                self.weight_layout(g),
                col,
                MatLayout::row_major(0, self.k_len, (r1 - r0) * self.ow),
                T::zero(),
                dst,
                self.out_layout(g, r0, r1),
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_group<T: Real>(
        &self,
        weight: &[T],
        wgrad: &mut [T],
        src: &[T],
        dy: &[T],
        dsrc: &mut [T],
        g: usize,
        col: &mut Vec<T>,
        dcol: &mut Vec<T>,
    ) {
        if self.spec.is_pointwise() {
            let dl = self.out_layout(g, 0, self.oh);
            gemm(
                T::one(),
                dy,
                dl,
                src,
                self.input_layout(g).t(),
                T::one(),
                wgrad,
                self.weight_layout(g),
            );
            gemm(
                T::one(),
                weight,
                self.weight_layout(g).t(),
                dy,
                dl,
                T::one(),
                dsrc,
                self.input_layout(g),
            );
            return;
        }
        for (r0, r1) in self.chunks() {
            let cols = (r1 - r0) * self.ow;
            let col_layout = MatLayout::row_major(0, self.k_len, cols);
            let dl = self.out_layout(g, r0, r1);
            self.im2col(src, g, r0, r1, col);
            gemm(
                T::one(),
                dy,
                dl,
                col,
                col_layout.t(),
                T::one(),
                wgrad,
                self.weight_layout(g),
            );
            dcol.clear();
            dcol.resize(self.k_len * cols, T::zero());
            gemm(
                T::one(),
                weight,
                self.weight_layout(g).t(),
                dy,
                dl,
                T::zero(),
                dcol,
                col_layout,
            );
            self.col2im(dcol, g, r0, r1, dsrc);
        }
    }
}
