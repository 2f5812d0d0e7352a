use crate::blocks::act::{gelu, gelu_grad};
use crate::blocks::attention::{Reduction, SpatialReductionAttention};
use crate::blocks::conv::{Conv2d, ConvSpec};
use crate::blocks::linear::Linear;
use crate::blocks::norm::LayerNorm;
use crate::blocks::param::{visit_fields, Init};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor4, Tokens};

/// Feed-forward network with a depthwise 3x3 convolution between the two
/// token-wise linear layers: `fc2(GELU(dwconv(fc1(x))))`.
#[derive(Debug, Clone)]
pub struct ConvFfn<T> {
    pub fc1: Linear<T>,
    pub dwconv: Conv2d<T>,
    pub fc2: Linear<T>,
    pre_act: Option<Tokens<T>>,
}

visit_fields!(ConvFfn { fc1, dwconv, fc2 });

impl<T: Real> ConvFfn<T> {
    pub fn new(dim: usize, hidden: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(dim, hidden, init),
            dwconv: Conv2d::new(ConvSpec::new(hidden, hidden, 3).pad(1).groups(hidden), init)?,
            fc2: Linear::new(hidden, dim, init),
            pre_act: None,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_dim()
    }

    pub fn forward(&self, x: &Tokens<T>) -> Result<Tokens<T>> {
        x.check()?;
        let h = self.fc1.forward(x)?;
        let mut z = self.dwconv.forward(&h.to_tensor4())?.to_tokens();
        z.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.fc2.forward(&z)
    }

    pub fn forward_train(&mut self, x: &Tokens<T>) -> Result<Tokens<T>> {
        x.check()?;
        let h = self.fc1.forward_train(x)?;
        let z = self.dwconv.forward_train(&h.to_tensor4())?.to_tokens();
        let mut a = z.clone();
        a.data.iter_mut().for_each(|v| *v = gelu(*v));
        self.pre_act = Some(z);
        self.fc2.forward_train(&a)
    }

    pub fn backward(&mut self, dy: &Tokens<T>) -> Result<Tokens<T>> {
        let z = self.pre_act.take().ok_or(Error::NoCache("conv_ffn"))?;
        let mut da = self.fc2.backward(dy)?;
        for (g, &v) in da.data.iter_mut().zip(&z.data) {
            *g *= gelu_grad(v);
        }
        let dh = self.dwconv.backward(&da.to_tensor4())?.to_tokens();
        self.fc1.backward(&dh)
    }
}

/// Pre-norm transformer block:
/// `x + attn(LN(x))`, then `+ ffn(LN(.))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock<T> {
    pub norm1: LayerNorm<T>,
    pub attn: SpatialReductionAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: ConvFfn<T>,
}

visit_fields!(TransformerBlock {
    norm1,
    attn,
    norm2,
    mlp
});

impl<T: Real> TransformerBlock<T> {
    pub const NORM_EPS: f64 = 1e-6;

    pub fn new(
        dim: usize,
        heads: usize,
        reduction: Reduction,
        mlp_ratio: usize,
        init: &mut Init,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(dim, Self::NORM_EPS, init),
            attn: SpatialReductionAttention::new(dim, heads, reduction, init)?,
            norm2: LayerNorm::new(dim, Self::NORM_EPS, init),
            mlp: ConvFfn::new(dim, dim * mlp_ratio, init)?,
        })
    }

    pub fn forward(&self, x: &Tokens<T>) -> Result<Tokens<T>> {
        let mut y = x.clone();
        y.add_assign(&self.attn.forward(&self.norm1.forward(x)?)?);
        let m = self.mlp.forward(&self.norm2.forward(&y)?)?;
        y.add_assign(&m);
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tokens<T>) -> Result<Tokens<T>> {
        let mut y = x.clone();
        let a = self.norm1.forward_train(x)?;
        y.add_assign(&self.attn.forward_train(&a)?);
        let m = self.norm2.forward_train(&y)?;
        let m = self.mlp.forward_train(&m)?;
        y.add_assign(&m);
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tokens<T>) -> Result<Tokens<T>> {
        let mut dx1 = dy.clone();
        let g = self.mlp.backward(dy)?;
        dx1.add_assign(&self.norm2.backward(&g)?);
        let g = self.attn.backward(&dx1)?;
        let mut dx = dx1;
        dx.add_assign(&self.norm1.backward(&g)?);
        Ok(dx)
    }
}

/// Overlapping patch embedding: strided convolution with `kernel > stride`,
/// flattened to tokens and layer-normalized.
#[derive(Debug, Clone)]
pub struct OverlapPatchEmbed<T> {
    pub proj: Conv2d<T>,
    pub norm: LayerNorm<T>,
}

visit_fields!(OverlapPatchEmbed { proj, norm });

impl<T: Real> OverlapPatchEmbed<T> {
    pub const NORM_EPS: f64 = 1e-5;

    pub fn new(
        in_c: usize,
        embed_dim: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: &mut Init,
    ) -> Result<Self> {
        ensure!(
            kernel > stride,
            "patch embedding needs kernel > stride for overlap, got kernel {kernel}, stride {stride}"
        );
        Ok(Self {
            proj: Conv2d::new(ConvSpec::new(in_c, embed_dim, kernel).stride(stride).pad(pad), init)?,
            norm: LayerNorm::new(embed_dim, Self::NORM_EPS, init),
        })
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tokens<T>> {
        self.norm.forward(&self.proj.forward(x)?.to_tokens())
    }

    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tokens<T>> {
        let t = self.proj.forward_train(x)?.to_tokens();
        self.norm.forward_train(&t)
    }

    pub fn backward(&mut self, dy: &Tokens<T>) -> Result<Tensor4<T>> {
        let g = self.norm.backward(dy)?;
        self.proj.backward(&g.to_tensor4())
    }
}
