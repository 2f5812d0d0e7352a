//! Bilinear resampling with half-pixel centers (`align_corners = false`).
//!
//! Output index `d` samples source coordinate `(d + 0.5) * in / out - 0.5`,
//! clamped to `[0, in - 1]`.

use crate::error::{ensure, Result};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            Tap {
                i0,
                i1,
                frac: T::lit(src - i0 as f64),
            }
        })
        .collect()
}

/// Resize every `(h, w)` plane to `(out_h, out_w)`; works for both up- and
/// down-sampling.
pub fn bilinear_resize<T: Real>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    ensure!(
        out_h > 0 && out_w > 0,
        "bilinear target size must be positive, got {out_h}x{out_w}"
    );
    let s = x.shape();
    let ty = taps::<T>(s.h, out_h);
    let tx = taps::<T>(s.w, out_w);
    let out_shape = s.with_hw(out_h, out_w);
    let mut out = Tensor4::zeros(out_shape);
    let (ip, op) = (s.plane(), out_shape.plane());
    let mut row0 = vec![T::zero(); out_w];
    let mut row1 = vec![T::zero(); out_w];
    for (src, dst) in x
        .data()
        .chunks_exact(ip)
        .zip(out.data_mut().chunks_exact_mut(op))
    {
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &src[t.i0 * s.w..(t.i0 + 1) * s.w];
            let r1 = &src[t.i1 * s.w..(t.i1 + 1) * s.w];
            for (ox, u) in tx.iter().enumerate() {
                row0[ox] = r0[u.i0] + (r0[u.i1] - r0[u.i0]) * u.frac;
                row1[ox] = r1[u.i0] + (r1[u.i1] - r1[u.i0]) * u.frac;
            }
            let drow = &mut dst[oy * out_w..(oy + 1) * out_w];
            for ox in 0..out_w {
                drow[ox] = row0[ox] + (row1[ox] - row0[ox]) * t.frac;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters `dy` back onto an `(in_h, in_w)` grid.
pub fn bilinear_resize_backward<T: Real>(
    dy: &Tensor4<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor4<T>> {
    ensure!(in_h > 0 && in_w > 0, "bilinear source size must be positive");
    let s = dy.shape();
    let ty = taps::<T>(in_h, s.h);
    let tx = taps::<T>(in_w, s.w);
    let in_shape = s.with_hw(in_h, in_w);
    let mut dx = Tensor4::zeros(in_shape);
    let (ip, op) = (in_shape.plane(), s.plane());
    for (g, dst) in dy
        .data()
        .chunks_exact(op)
        .zip(dx.data_mut().chunks_exact_mut(ip))
    {
        for (oy, t) in ty.iter().enumerate() {
            let wy1 = t.frac;
            let wy0 = T::one() - wy1;
            for (ox, u) in tx.iter().enumerate() {
                let v = g[oy * s.w + ox];
                let wx1 = u.frac;
                let wx0 = T::one() - wx1;
                dst[t.i0 * in_w + u.i0] += v * wy0 * wx0;
                dst[t.i0 * in_w + u.i1] += v * wy0 * wx1;
                dst[t.i1 * in_w + u.i0] += v * wy1 * wx0;
                dst[t.i1 * in_w + u.i1] += v * wy1 * wx1;
            }
        }
    }
    Ok(dx)
}

/// Bilinear upsampling; the target must be at least as large as the input.
pub fn bilinear_upsample<T: Real>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
    ensure!(
        out_h > 0 && out_w > 0,
        "upsample target size must be positive, got {out_h}x{out_w}"
    );
    let s = x.shape();
    ensure!(
        out_h >= s.h && out_w >= s.w,
        "upsample target {out_h}x{out_w} is smaller than input {}x{}",
        s.h,
        s.w
    );
    bilinear_resize(x, out_h, out_w)
}

/// Parameter-free bilinear upsampling layer that remembers its input size.
#[derive(Debug, Clone, Default)]
pub struct Upsample {
    input: Option<Shape4>,
}

impl Upsample {
    pub fn forward_train<T: Real>(
        &mut self,
        x: &Tensor4<T>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor4<T>> {
        let y = bilinear_upsample(x, out_h, out_w)?;
        self.input = Some(x.shape());
        Ok(y)
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = self
            .input
            .take()
            .ok_or(crate::error::Error::NoCache("upsample"))?;
        bilinear_resize_backward(dy, s.h, s.w)
    }
}
