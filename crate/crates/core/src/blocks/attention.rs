use crate::blocks::act::{gelu, gelu_grad};
use crate::blocks::conv::{Conv2d, ConvSpec};
use crate::blocks::linear::Linear;
use crate::blocks::norm::LayerNorm;
use crate::blocks::param::{visit_fields, Init};
use crate::error::{ensure, Error, Result};
use crate::tensor::{gemm, MatLayout, Real, Shape4, Tensor4, Tokens};

/// Output grid of the pooled key/value reduction.
pub const POOL_SIZE: usize = 7;

/// How keys and values are spatially reduced before attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Reduction {
    /// Strided `sr x sr` convolution followed by layer norm.
    Conv(usize),
    /// Adaptive average pool to 7x7, 1x1 convolution, layer norm, GELU.
    Pool,
}

impl Reduction {
    /// Number of key/value tokens for an `h x w` query grid.
    pub fn kv_grid(&self, h: usize, w: usize) -> (usize, usize) {
        match *self {
            Reduction::Conv(r) => (h / r, w / r),
            Reduction::Pool => (POOL_SIZE, POOL_SIZE),
        }
    }
}

/// Multi-head attention where keys and values come from a spatially reduced
/// copy of the tokens. With `Reduction::Conv(1)` it is plain self-attention.
#[derive(Debug, Clone)]
pub struct SpatialReductionAttention<T> {
    pub q: Linear<T>,
    pub kv: Linear<T>,
    pub proj: Linear<T>,
    pub sr: Option<Conv2d<T>>,
    pub norm: Option<LayerNorm<T>>,
    heads: usize,
    reduction: Reduction,
    cache: Option<AttnCache<T>>,
}

#[derive(Debug, Clone)]
struct AttnCache<T> {
    q: Tokens<T>,
    kv: Tokens<T>,
    probs: Vec<T>,
    /// token grid of the input, and pre-GELU activations for the pooled path
    grid: (usize, usize),
    pool_in: Option<Shape4>,
    pre_act: Option<Tokens<T>>,
}

visit_fields!(SpatialReductionAttention {
    q,
    kv,
    proj,
    sr,
    norm
});

impl<T: Real> SpatialReductionAttention<T> {
    pub const NORM_EPS: f64 = 1e-5;

    pub fn new(dim: usize, heads: usize, reduction: Reduction, init: &mut Init) -> Result<Self> {
        ensure!(heads > 0 && dim % heads == 0, "embed dim {dim} not divisible by {heads} heads");
        let q = Linear::new(dim, dim, init);
        let kv = Linear::new(dim, 2 * dim, init);
        let proj = Linear::new(dim, dim, init);
        let (sr, norm) = match reduction {
            Reduction::Conv(0) => return Err(Error::InvalidArgument("sr_ratio must be >= 1".into())),
            Reduction::Conv(1) => (None, None),
            Reduction::Conv(r) => (
                Some(Conv2d::new(ConvSpec::new(dim, dim, r).stride(r), init)?),
                Some(LayerNorm::new(dim, Self::NORM_EPS, init)),
            ),
            Reduction::Pool => (
                Some(Conv2d::new(ConvSpec::new(dim, dim, 1), init)?),
                Some(LayerNorm::new(dim, Self::NORM_EPS, init)),
            ),
        };
        Ok(Self {
            q,
            kv,
            proj,
            sr,
            norm,
            heads,
            reduction,
            cache: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.in_dim()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn reduction(&self) -> Reduction {
        self.reduction
    }

    fn check(&self, x: &Tokens<T>) -> Result<()> {
        x.check()?;
        ensure!(
            x.d == self.dim(),
            "attention over {} features got d = {}",
            self.dim(),
            x.d
        );
        if let Reduction::Conv(r) = self.reduction {
            ensure!(
                x.h % r == 0 && x.w % r == 0,
                "token grid {}x{} not divisible by sr_ratio {r}",
                x.h,
                x.w
            );
        }
        Ok(())
    }

    fn reduce(&self, x: &Tokens<T>) -> Result<Tokens<T>> {
        let (Some(sr), Some(norm)) = (&self.sr, &self.norm) else {
            return Ok(x.clone());
        };
        let img = x.to_tensor4();
        let img = match self.reduction {
            Reduction::Pool => adaptive_avg_pool(&img, POOL_SIZE, POOL_SIZE),
            Reduction::Conv(_) => img,
        };
        let mut r = norm.forward(&sr.forward(&img)?.to_tokens())?;
        if self.reduction == Reduction::Pool {
            r.data.iter_mut().for_each(|v| *v = gelu(*v));
        }
        Ok(r)
    }

    /// Softmax attention weights `(n, heads, l, l_kv)` for inspection.
    pub fn attention_map(&self, x: &Tokens<T>) -> Result<(Vec<T>, usize)> {
        self.check(x)?;
        let q = self.q.forward(x)?;
        let kv = self.kv.forward(&self.reduce(x)?)?;
        let lk = kv.l;
        Ok((attend(&q, &kv, self.heads).1, lk))
    }

    pub fn forward(&self, x: &Tokens<T>) -> Result<Tokens<T>> {
        self.check(x)?;
        let q = self.q.forward(x)?;
        let kv = self.kv.forward(&self.reduce(x)?)?;
        let (o, _) = attend(&q, &kv, self.heads);
        self.proj.forward(&o)
    }

    pub fn forward_train(&mut self, x: &Tokens<T>) -> Result<Tokens<T>> {
        self.check(x)?;
        let q = self.q.forward_train(x)?;
        let mut pool_in = None;
        let mut pre_act = None;
        let reduced = match (&mut self.sr, &mut self.norm) {
            (Some(sr), Some(norm)) => {
                let mut img = x.to_tensor4();
                if self.reduction == Reduction::Pool {
                    pool_in = Some(img.shape());
                    img = adaptive_avg_pool(&img, POOL_SIZE, POOL_SIZE);
                }
                let mut r = norm.forward_train(&sr.forward_train(&img)?.to_tokens())?;
                if self.reduction == Reduction::Pool {
                    pre_act = Some(r.clone());
                    r.data.iter_mut().for_each(|v| *v = gelu(*v));
                }
                r
            }
            _ => x.clone(),
        };
        let kv = self.kv.forward_train(&reduced)?;
        let (o, probs) = attend(&q, &kv, self.heads);
        let y = self.proj.forward_train(&o)?;
        self.cache = Some(AttnCache {
            q,
            kv,
            probs,
            grid: (x.h, x.w),
            pool_in,
            pre_act,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tokens<T>) -> Result<Tokens<T>> {
        let c = self.cache.take().ok_or(Error::NoCache("sra_attention"))?;
        let d_o = self.proj.backward(dy)?;
        let (dq, dkv) = attend_backward(&c.q, &c.kv, &c.probs, &d_o, self.heads);
        let mut dx = self.q.backward(&dq)?;
        let mut dred = self.kv.backward(&dkv)?;
        match (&mut self.sr, &mut self.norm) {
            (Some(sr), Some(norm)) => {
                if let Some(pre) = &c.pre_act {
                    for (g, &z) in dred.data.iter_mut().zip(&pre.data) {
                        *g *= gelu_grad(z);
                    }
                }
                let dn = norm.backward(&dred)?;
                let mut dimg = sr.backward(&dn.to_tensor4())?;
                if let Some(s) = c.pool_in {
                    dimg = adaptive_avg_pool_backward(&dimg, s.h, s.w);
                }
                debug_assert_eq!((dimg.shape().h, dimg.shape().w), c.grid);
                dx.add_assign(&dimg.to_tokens());
            }
            _ => dx.add_assign(&dred),
        }
        Ok(dx)
    }
}

/// Returns `(output, probs)`; `probs` is laid out `(n, heads, l, l_kv)`.
fn attend<T: Real>(q: &Tokens<T>, kv: &Tokens<T>, heads: usize) -> (Tokens<T>, Vec<T>) {
    let (n, l, d, lk) = (q.n, q.l, q.d, kv.l);
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); n * l * d];
    let mut probs = vec![T::zero(); n * heads * l * lk];
    for b in 0..n {
        for h in 0..heads {
            let ql = MatLayout::row_major(b * l * d, l, d).cols(h * dh, dh);
            let kvl = MatLayout::row_major(b * lk * 2 * d, lk, 2 * d);
            let kl = kvl.cols(h * dh, dh);
            let vl = kvl.cols(d + h * dh, dh);
            let poff = (b * heads + h) * l * lk;
            let pl = MatLayout::row_major(poff, l, lk);
            gemm(scale, &q.data, ql, &kv.data, kl.t(), T::zero(), &mut probs, pl);
            for row in probs[poff..poff + l * lk].chunks_exact_mut(lk) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
            let ol = MatLayout::row_major(b * l * d, l, d).cols(h * dh, dh);
            gemm(T::one(), &probs, pl, &kv.data, vl, T::zero(), &mut out, ol);
        }
    }
    (q.with_data(d, out), probs)
}

fn attend_backward<T: Real>(
    q: &Tokens<T>,
    kv: &Tokens<T>,
    probs: &[T],
    d_o: &Tokens<T>,
    heads: usize,
) -> (Tokens<T>, Tokens<T>) {
    let (n, l, d, lk) = (q.n, q.l, q.d, kv.l);
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); q.data.len()];
    let mut dkv = vec![T::zero(); kv.data.len()];
    let mut ds = vec![T::zero(); l * lk];
    for b in 0..n {
        for h in 0..heads {
            let ql = MatLayout::row_major(b * l * d, l, d).cols(h * dh, dh);
            let kvl = MatLayout::row_major(b * lk * 2 * d, lk, 2 * d);
            let kl = kvl.cols(h * dh, dh);
            let vl = kvl.cols(d + h * dh, dh);
            let poff = (b * heads + h) * l * lk;
            let pl = MatLayout::row_major(poff, l, lk);
            let sl = MatLayout::row_major(0, l, lk);
            // dV = P^T dO
            gemm(T::one(), probs, pl.t(), &d_o.data, ql, T::one(), &mut dkv, vl);
            // dP = dO V^T
            gemm(T::one(), &d_o.data, ql, &kv.data, vl.t(), T::zero(), &mut ds, sl);
            let p = &probs[poff..poff + l * lk];
            for (drow, prow) in ds.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in drow.iter_mut().zip(prow) {
                    *g = pv * (*g - dot);
                }
            }
            gemm(scale, &ds, sl, &kv.data, kl, T::one(), &mut dq, ql);
            gemm(scale, &ds, sl.t(), &q.data, ql, T::one(), &mut dkv, kl);
        }
    }
    (q.with_data(d, dq), kv.with_data(2 * d, dkv))
}

fn bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = i * input / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

/// Adaptive average pooling with floor/ceil bin edges.
pub fn adaptive_avg_pool<T: Real>(x: &Tensor4<T>, out_h: usize, out_w: usize) -> Tensor4<T> {
    let s = x.shape();
    let by = bins(s.h, out_h);
    let bx = bins(s.w, out_w);
    let mut out = Tensor4::zeros(s.with_hw(out_h, out_w));
    let (ip, op) = (s.plane(), out_h * out_w);
    for (src, dst) in x.data().chunks_exact(ip).zip(out.data_mut().chunks_exact_mut(op)) {
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let mut acc = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[yy * s.w + xx];
                    }
                }
                dst[oy * out_w + ox] = acc / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Real>(dy: &Tensor4<T>, in_h: usize, in_w: usize) -> Tensor4<T> {
    let s = dy.shape();
    let by = bins(in_h, s.h);
    let bx = bins(in_w, s.w);
    let mut dx = Tensor4::zeros(s.with_hw(in_h, in_w));
    let (ip, op) = (in_h * in_w, s.plane());
    for (g, dst) in dy.data().chunks_exact(op).zip(dx.data_mut().chunks_exact_mut(ip)) {
        for (oy, &(y0, y1)) in by.iter().enumerate() {
            for (ox, &(x0, x1)) in bx.iter().enumerate() {
                let v = g[oy * s.w + ox] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        dst[yy * in_w + xx] += v;
                    }
                }
            }
        }
    }
    dx
}
