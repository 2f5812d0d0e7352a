use crate::blocks::act::{relu_backward_inplace, relu_inplace};
use crate::blocks::conv::{Conv2d, ConvSpec};
use crate::blocks::norm::BatchNorm2d;
use crate::blocks::param::{visit_fields, Init};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// 1x1 convolution (no bias) -> batch norm -> ReLU. Used to project every
/// encoder scale to a common channel width.
#[derive(Debug, Clone)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
    out: Option<Tensor4<T>>,
}

visit_fields!(ConvBnRelu { conv, bn });

impl<T: Real> ConvBnRelu<T> {
    pub fn new(in_c: usize, out_c: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(ConvSpec::new(in_c, out_c, 1).no_bias(), init)?,
            bn: BatchNorm2d::new(out_c, init),
            out: None,
        })
    }

    pub fn param_count(in_c: usize, out_c: usize) -> usize {
        in_c * out_c + 2 * out_c
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut y = self.bn.forward(&self.conv.forward(x)?)?;
        relu_inplace(y.data_mut());
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let h = self.conv.forward_train(x)?;
        let mut y = self.bn.forward_train(&h)?;
        relu_inplace(y.data_mut());
        self.out = Some(y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let y = self.out.take().ok_or(Error::NoCache("conv_bn_relu"))?;
        let mut g = dy.clone();
        relu_backward_inplace(y.data(), g.data_mut());
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }
}

/// Projection used on the identity path when channel counts differ.
#[derive(Debug, Clone)]
pub struct Shortcut<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

visit_fields!(Shortcut { conv, bn });

/// `ReLU(BN(conv3x3(ReLU(BN(conv3x3(x))))) + shortcut(x))`.
///
/// The shortcut is `x` itself when `in_c == out_c`, otherwise a 1x1
/// convolution followed by batch norm. Convolutions carry no bias.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<Shortcut<T>>,
    cache: Option<ResidualCache<T>>,
}

#[derive(Debug, Clone)]
struct ResidualCache<T> {
    hidden: Tensor4<T>,
    out: Tensor4<T>,
}

visit_fields!(ResidualBlock {
    conv1,
    bn1,
    conv2,
    bn2,
    shortcut
});

impl<T: Real> ResidualBlock<T> {
    pub fn new(in_c: usize, out_c: usize, init: &mut Init) -> Result<Self> {
        let conv3 = |i, o| ConvSpec::new(i, o, 3).pad(1).no_bias();
        let conv1 = Conv2d::new(conv3(in_c, out_c), init)?;
        let bn1 = BatchNorm2d::new(out_c, init);
        let conv2 = Conv2d::new(conv3(out_c, out_c), init)?;
        let bn2 = BatchNorm2d::new(out_c, init);
        let shortcut = if in_c != out_c {
            Some(Shortcut {
                conv: Conv2d::new(ConvSpec::new(in_c, out_c, 1).no_bias(), init)?,
                bn: BatchNorm2d::new(out_c, init),
            })
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            cache: None,
        })
    }

    pub fn param_count(in_c: usize, out_c: usize) -> usize {
        let main = in_c * out_c * 9 + out_c * out_c * 9 + 4 * out_c;
        let proj = if in_c != out_c { in_c * out_c + 2 * out_c } else { 0 };
        main + proj
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.spec().in_c
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.spec().out_c
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut h = self.bn1.forward(&self.conv1.forward(x)?)?;
        relu_inplace(h.data_mut());
        let mut y = self.bn2.forward(&self.conv2.forward(&h)?)?;
        match &self.shortcut {
            Some(sc) => y.add_assign(&sc.bn.forward(&sc.conv.forward(x)?)?),
            None => y.add_assign(x),
        }
        relu_inplace(y.data_mut());
        Ok(y)
    }

    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut h = self.bn1.forward_train(&self.conv1.forward_train(x)?)?;
        relu_inplace(h.data_mut());
        let mut y = self.bn2.forward_train(&self.conv2.forward_train(&h)?)?;
        match &mut self.shortcut {
            Some(sc) => y.add_assign(&sc.bn.forward_train(&sc.conv.forward_train(x)?)?),
            None => y.add_assign(x),
        }
        relu_inplace(y.data_mut());
        self.cache = Some(ResidualCache {
            hidden: h,
            out: y.clone(),
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let ResidualCache { hidden, out } =
            self.cache.take().ok_or(Error::NoCache("residual_block"))?;
        let mut g = dy.clone();
        relu_backward_inplace(out.data(), g.data_mut());
        let mut dx = match &mut self.shortcut {
            Some(sc) => {
                let s = sc.bn.backward(&g)?;
                sc.conv.backward(&s)?
            }
            None => g.clone(),
        };
        let mut gh = self.conv2.backward(&self.bn2.backward(&g)?)?;
        relu_backward_inplace(hidden.data(), gh.data_mut());
        let main = self.conv1.backward(&self.bn1.backward(&gh)?)?;
        dx.add_assign(&main);
        Ok(dx)
    }
}
