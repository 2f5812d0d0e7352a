//! The PVTFormer segmentation network.
//!
//! ```text
//! x ─ encoder ─┬ f1 ─ reduce ─ c1 ─┬──────────────── up ─ u1 ─┐
//!              ├ f2 ─ reduce ─ c2 ─┼─────────┐       up ─ u2 ─┤
//!              ├ f3 ─ reduce ─ c3 ─┼─ dec(c3, c2) = d1        ├ concat ─ residual ─ 1x1 ─ sigmoid
//!              └ f4 (unused)       │  dec(d1, c1) = d2 ─ ×4 ─ d3
//!                                  └──────────────── up ─ u3 ─┘
//! ```
//!
//! Fusion order is `[u1, u2, u3, d3]`.

use serde::{Deserialize, Serialize};

use crate::blocks::act::sigmoid;
use crate::blocks::param::visit_fields;
use crate::blocks::{
    bilinear_upsample, Conv2d, ConvBnRelu, ConvSpec, Init, ResidualBlock, Upsample,
};
use crate::encoder::{PvtV2Config, PvtV2Encoder};
use crate::error::{ensure, invalid, Result};
use crate::tensor::{Real, Shape4, Tensor4};

/// Full wiring of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvtFormerConfig {
    pub encoder: PvtV2Config,
    /// Common width every encoder scale is reduced to.
    pub reduce_c: usize,
    /// Training image side length.
    pub out_size: usize,
    /// Output width of the fusion residual block.
    pub head_channels: usize,
}

impl PvtFormerConfig {
    pub const PRESETS: [&'static str; 2] = ["default", "tiny"];

    /// PVT v2 b3 encoder, 64-channel head, 256x256 input.
    pub fn default_b3() -> Self {
        Self {
            encoder: PvtV2Config::b3(),
            reduce_c: 64,
            out_size: 256,
            head_channels: 64,
        }
    }

    /// Desk-scale configuration: tiny encoder, 16-channel decoder, 64x64 input.
    pub fn tiny() -> Self {
        Self {
            encoder: PvtV2Config::tiny(),
            reduce_c: 16,
            out_size: 64,
            head_channels: 16,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "b3" => Ok(Self::default_b3()),
            "tiny" => Ok(Self::tiny()),
            other => Err(invalid!(
                "unknown preset `{other}` (expected one of {:?})",
                Self::PRESETS
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        ensure!(
            self.reduce_c > 0 && self.head_channels > 0,
            "decoder widths must be positive"
        );
        ensure!(
            self.out_size > 0 && self.out_size % self.encoder.total_stride() == 0,
            "out_size {} must be a multiple of {}",
            self.out_size,
            self.encoder.total_stride()
        );
        Ok(())
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.encoder.in_channels, self.out_size, self.out_size)
    }
}

/// Bilinear upsampling to the input resolution, then a residual block.
#[derive(Debug, Clone)]
pub struct UpBlock<T> {
    pub res: ResidualBlock<T>,
    up: Upsample,
}

visit_fields!(UpBlock { res });

impl<T: Real> UpBlock<T> {
    pub fn new(channels: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            res: ResidualBlock::new(channels, channels, init)?,
            up: Upsample::default(),
        })
    }

    pub fn forward(&self, x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
        ensure!(
            x.shape().c == self.res.in_channels(),
            "up block expects {} channels, got {}",
            self.res.in_channels(),
            x.shape().c
        );
        self.res.forward(&bilinear_upsample(x, out_h, out_w)?)
    }

    pub fn forward_train(&mut self, x: &Tensor4<T>, out_h: usize, out_w: usize) -> Result<Tensor4<T>> {
        ensure!(
            x.shape().c == self.res.in_channels(),
            "up block expects {} channels, got {}",
            self.res.in_channels(),
            x.shape().c
        );
        let u = self.up.forward_train(x, out_h, out_w)?;
        self.res.forward_train(&u)
    }

    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.res.backward(dy)?;
        self.up.backward(&g)
    }
}

/// Upsample the coarser map to the skip resolution, concatenate
/// `[upsampled, skip]` along channels, refine with a residual block.
#[derive(Debug, Clone)]
pub struct DecoderBlock<T> {
    pub res: ResidualBlock<T>,
    up: Upsample,
    low_c: usize,
}

visit_fields!(DecoderBlock { res });

impl<T: Real> DecoderBlock<T> {
    pub fn new(low_c: usize, skip_c: usize, out_c: usize, init: &mut Init) -> Result<Self> {
        Ok(Self {
            res: ResidualBlock::new(low_c + skip_c, out_c, init)?,
            up: Upsample::default(),
            low_c,
        })
    }

    fn check(&self, low: &Tensor4<T>, skip: &Tensor4<T>) -> Result<()> {
        let (l, s) = (low.shape(), skip.shape());
        ensure!(
            s.h == 2 * l.h && s.w == 2 * l.w && s.n == l.n,
            "decoder skip {s} must be twice the spatial size of {l}"
        );
        ensure!(
            l.c == self.low_c && l.c + s.c == self.res.in_channels(),
            "decoder channel mismatch: low {} + skip {} vs {}",
            l.c,
            s.c,
            self.res.in_channels()
        );
        Ok(())
    }

    pub fn forward(&self, low: &Tensor4<T>, skip: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(low, skip)?;
        let s = skip.shape();
        let up = bilinear_upsample(low, s.h, s.w)?;
        self.res.forward(&Tensor4::concat_channels(&[&up, skip])?)
    }

    pub fn forward_train(&mut self, low: &Tensor4<T>, skip: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(low, skip)?;
        let s = skip.shape();
        let up = self.up.forward_train(low, s.h, s.w)?;
        self.res.forward_train(&Tensor4::concat_channels(&[&up, skip])?)
    }

    /// Returns `(d_low, d_skip)`.
    pub fn backward(&mut self, dy: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let g = self.res.backward(dy)?;
        let skip_c = g.shape().c - self.low_c;
        let mut parts = g.split_channels(&[self.low_c, skip_c])?.into_iter();
        let (d_up, d_skip) = (parts.next().unwrap(), parts.next().unwrap());
        Ok((self.up.backward(&d_up)?, d_skip))
    }
}

#[derive(Debug, Clone)]
pub struct PvtFormer<T> {
    pub encoder: PvtV2Encoder<T>,
    pub reducers: Vec<ConvBnRelu<T>>,
    pub up_blocks: Vec<UpBlock<T>>,
    pub decoders: Vec<DecoderBlock<T>>,
    pub fuse: ResidualBlock<T>,
    pub head: Conv2d<T>,
    config: PvtFormerConfig,
    final_up: Upsample,
}

visit_fields!(PvtFormer {
    encoder,
    reducers,
    up_blocks,
    decoders,
    fuse,
    head
});

impl<T: Real> PvtFormer<T> {
    /// Randomly initialized network; deterministic in `seed`.
    pub fn new(config: &PvtFormerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let rc = config.reduce_c;
        let encoder = PvtV2Encoder::new(&config.encoder, &mut init)?;
        let reducers = config.encoder.embed_dims[..3]
            .iter()
            .map(|&c| ConvBnRelu::new(c, rc, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let up_blocks = (0..3)
            .map(|_| UpBlock::new(rc, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let decoders = (0..2)
            .map(|_| DecoderBlock::new(rc, rc, rc, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ResidualBlock::new(4 * rc, config.head_channels, &mut init)?;
        let head = Conv2d::new(ConvSpec::new(config.head_channels, 1, 1), &mut init)?;
        Ok(Self {
            encoder,
            reducers,
            up_blocks,
            decoders,
            fuse,
            head,
            config: config.clone(),
            final_up: Upsample::default(),
        })
    }

    pub fn config(&self) -> &PvtFormerConfig {
        &self.config
    }

    /// Pre-sigmoid output `(n, 1, h, w)`, evaluation mode.
    pub fn forward_logits(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        let p = self.encoder.forward(x)?;
        let c1 = self.reducers[0].forward(&p.f1)?;
        let c2 = self.reducers[1].forward(&p.f2)?;
        let c3 = self.reducers[2].forward(&p.f3)?;
        let u1 = self.up_blocks[0].forward(&c1, s.h, s.w)?;
        let u2 = self.up_blocks[1].forward(&c2, s.h, s.w)?;
        let u3 = self.up_blocks[2].forward(&c3, s.h, s.w)?;
        let d1 = self.decoders[0].forward(&c3, &c2)?;
        let d2 = self.decoders[1].forward(&d1, &c1)?;
        let d3 = bilinear_upsample(&d2, s.h, s.w)?;
        let fused = Tensor4::concat_channels(&[&u1, &u2, &u3, &d3])?;
        self.head.forward(&self.fuse.forward(&fused)?)
    }

    /// Probabilities in `(0, 1)`, evaluation mode.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward_logits(x)?.map(sigmoid))
    }

    /// Training-mode logits; caches activations for [`PvtFormer::backward`].
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        let p = self.encoder.forward_train(x)?;
        let c1 = self.reducers[0].forward_train(&p.f1)?;
        let c2 = self.reducers[1].forward_train(&p.f2)?;
        let c3 = self.reducers[2].forward_train(&p.f3)?;
        let u1 = self.up_blocks[0].forward_train(&c1, s.h, s.w)?;
        let u2 = self.up_blocks[1].forward_train(&c2, s.h, s.w)?;
        let u3 = self.up_blocks[2].forward_train(&c3, s.h, s.w)?;
        let d1 = self.decoders[0].forward_train(&c3, &c2)?;
        let d2 = self.decoders[1].forward_train(&d1, &c1)?;
        let d3 = self.final_up.forward_train(&d2, s.h, s.w)?;
        let fused = Tensor4::concat_channels(&[&u1, &u2, &u3, &d3])?;
        let f = self.fuse.forward_train(&fused)?;
        self.head.forward_train(&f)
    }

    /// Back-propagates a logit gradient into every parameter; returns the
    /// input gradient.
    pub fn backward(&mut self, d_logits: &Tensor4<T>) -> Result<Tensor4<T>> {
        let rc = self.config.reduce_c;
        let df = self.head.backward(d_logits)?;
        let d_fused = self.fuse.backward(&df)?;
        let mut parts = d_fused.split_channels(&[rc; 4])?.into_iter();
        let (du1, du2, du3, dd3) = (
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        );
        let dd2 = self.final_up.backward(&dd3)?;
        let mut dc1 = self.up_blocks[0].backward(&du1)?;
        let mut dc2 = self.up_blocks[1].backward(&du2)?;
        let mut dc3 = self.up_blocks[2].backward(&du3)?;
        let (dd1, dc1_skip) = self.decoders[1].backward(&dd2)?;
        dc1.add_assign(&dc1_skip);
        let (dc3_low, dc2_skip) = self.decoders[0].backward(&dd1)?;
        dc3.add_assign(&dc3_low);
        dc2.add_assign(&dc2_skip);
        let df1 = self.reducers[0].backward(&dc1)?;
        let df2 = self.reducers[1].backward(&dc2)?;
        let df3 = self.reducers[2].backward(&dc3)?;
        let dx = self.encoder.backward([Some(df1), Some(df2), Some(df3), None])?;
        dx.ok_or_else(|| invalid!("encoder produced no input gradient"))
    }
}

/// Binarize probabilities: 1 where `p >= threshold`.
pub fn predict_mask<T: Real>(probs: &Tensor4<T>, threshold: f64) -> Result<Vec<u8>> {
    ensure!(
        threshold > 0.0 && threshold < 1.0,
        "threshold must lie in (0, 1), got {threshold}"
    );
    let t = T::lit(threshold);
    Ok(probs.data().iter().map(|&p| u8::from(p >= t)).collect())
}
