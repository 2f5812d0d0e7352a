//! Four-stage PVT v2 encoder producing a feature pyramid at strides 4, 8, 16
//! and 32.

use serde::{Deserialize, Serialize};

use crate::blocks::param::visit_fields;
use crate::blocks::{Init, LayerNorm, OverlapPatchEmbed, Reduction, TransformerBlock};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Stage hyperparameters of the hierarchical encoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PvtV2Config {
    pub in_channels: usize,
    pub embed_dims: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub mlp_ratios: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub patches: [PatchSpec; 4],
    /// Pooled 7x7 key/value reduction instead of strided convolution.
    #[serde(default)]
    pub linear_sra: bool,
}

const PATCHES: [PatchSpec; 4] = [
    PatchSpec {
        kernel: 7,
        stride: 4,
        pad: 3,
    },
    PatchSpec {
        kernel: 3,
        stride: 2,
        pad: 1,
    },
    PatchSpec {
        kernel: 3,
        stride: 2,
        pad: 1,
    },
    PatchSpec {
        kernel: 3,
        stride: 2,
        pad: 1,
    },
];

impl PvtV2Config {
    /// The b3 variant.
    pub fn b3() -> Self {
        Self {
            in_channels: 3,
            embed_dims: [64, 128, 320, 512],
            depths: [3, 4, 18, 3],
            heads: [1, 2, 5, 8],
            mlp_ratios: [8, 8, 4, 4],
            sr_ratios: [8, 4, 2, 1],
            patches: PATCHES,
            linear_sra: false,
        }
    }

    /// Small widths and one block per stage, for gradient checks and CI.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            embed_dims: [8, 16, 24, 32],
            depths: [1, 1, 1, 1],
            heads: [1, 2, 3, 4],
            mlp_ratios: [8, 8, 4, 4],
            sr_ratios: [8, 4, 2, 1],
            patches: PATCHES,
            linear_sra: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.in_channels > 0, "encoder needs at least one input channel");
        for i in 0..4 {
            ensure!(
                self.embed_dims[i] > 0 && self.depths[i] > 0 && self.mlp_ratios[i] > 0,
                "stage {i}: dims, depth and mlp ratio must be positive"
            );
            ensure!(
                self.heads[i] > 0 && self.embed_dims[i] % self.heads[i] == 0,
                "stage {i}: embed dim {} not divisible by {} heads",
                self.embed_dims[i],
                self.heads[i]
            );
            ensure!(self.sr_ratios[i] > 0, "stage {i}: sr_ratio must be >= 1");
            let p = self.patches[i];
            ensure!(
                p.kernel > p.stride && p.stride > 0,
                "stage {i}: patch kernel {} must exceed stride {}",
                p.kernel,
                p.stride
            );
            if i > 0 {
                ensure!(
                    self.embed_dims[i] > self.embed_dims[i - 1],
                    "embed dims must be strictly increasing"
                );
            }
        }
        Ok(())
    }

    pub fn reduction(&self, stage: usize) -> Reduction {
        if self.linear_sra {
            Reduction::Pool
        } else {
            Reduction::Conv(self.sr_ratios[stage])
        }
    }

    /// Total downsampling factor of the last stage.
    pub fn total_stride(&self) -> usize {
        self.patches.iter().map(|p| p.stride).product()
    }

    /// Token grid of every stage for an `h x w` input.
    pub fn stage_grids(&self, h: usize, w: usize) -> [(usize, usize); 4] {
        let mut grids = [(0, 0); 4];
        let (mut gh, mut gw) = (h, w);
        for (i, p) in self.patches.iter().enumerate() {
            gh = (gh + 2 * p.pad).saturating_sub(p.kernel) / p.stride + 1;
            gw = (gw + 2 * p.pad).saturating_sub(p.kernel) / p.stride + 1;
            grids[i] = (gh, gw);
        }
        grids
    }

    /// Checks channel count and divisibility of an input shape.
    pub fn check_input(&self, s: Shape4) -> Result<()> {
        ensure!(
            s.c == self.in_channels,
            "encoder expects {} input channels, got {}",
            self.in_channels,
            s.c
        );
        let stride = self.total_stride();
        ensure!(
            s.h > 0 && s.w > 0 && s.h % stride == 0 && s.w % stride == 0,
            "input {}x{} must be a positive multiple of {stride}",
            s.h,
            s.w
        );
        if !self.linear_sra {
            for (i, (gh, gw)) in self.stage_grids(s.h, s.w).into_iter().enumerate() {
                let r = self.sr_ratios[i];
                ensure!(
                    gh % r == 0 && gw % r == 0,
                    "stage {i} grid {gh}x{gw} not divisible by sr_ratio {r}"
                );
            }
        }
        Ok(())
    }
}

/// Patch embedding, transformer blocks and a closing layer norm.
#[derive(Debug, Clone)]
pub struct Stage<T> {
    pub patch_embed: OverlapPatchEmbed<T>,
    pub blocks: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
}

visit_fields!(Stage {
    patch_embed,
    blocks,
    norm
});

impl<T: Real> Stage<T> {
    fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut t = self.patch_embed.forward(x)?;
        for b in &self.blocks {
            t = b.forward(&t)?;
        }
        Ok(self.norm.forward(&t)?.to_tensor4())
    }

    fn forward_train(&mut self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut t = self.patch_embed.forward_train(x)?;
        for b in &mut self.blocks {
            t = b.forward_train(&t)?;
        }
        Ok(self.norm.forward_train(&t)?.to_tensor4())
    }

    fn backward(&mut self, dy: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = self.norm.backward(&dy.to_tokens())?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.patch_embed.backward(&g)
    }
}

/// Outputs of the four encoder stages.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub f1: Tensor4<T>,
    pub f2: Tensor4<T>,
    pub f3: Tensor4<T>,
    pub f4: Tensor4<T>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn shapes(&self) -> [Shape4; 4] {
        [self.f1.shape(), self.f2.shape(), self.f3.shape(), self.f4.shape()]
    }
}

#[derive(Debug, Clone)]
pub struct PvtV2Encoder<T> {
    pub stages: Vec<Stage<T>>,
    config: PvtV2Config,
}

visit_fields!(PvtV2Encoder { stages });

impl<T: Real> PvtV2Encoder<T> {
    pub fn new(config: &PvtV2Config, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut in_c = config.in_channels;
        for i in 0..4 {
            let d = config.embed_dims[i];
            let p = config.patches[i];
            let patch_embed = OverlapPatchEmbed::new(in_c, d, p.kernel, p.stride, p.pad, init)?;
            let blocks = (0..config.depths[i])
                .map(|_| {
                    TransformerBlock::new(
                        d,
                        config.heads[i],
                        config.reduction(i),
                        config.mlp_ratios[i],
                        init,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(d, TransformerBlock::<T>::NORM_EPS, init);
            stages.push(Stage {
                patch_embed,
                blocks,
                norm,
            });
            in_c = d;
        }
        Ok(Self {
            stages,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &PvtV2Config {
        &self.config
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<FeaturePyramid<T>> {
        self.config.check_input(x.shape())?;
        let f1 = self.stages[0].forward(x)?;
        let f2 = self.stages[1].forward(&f1)?;
        let f3 = self.stages[2].forward(&f2)?;
        let f4 = self.stages[3].forward(&f3)?;
        Ok(FeaturePyramid { f1, f2, f3, f4 })
    }

    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<FeaturePyramid<T>> {
        self.config.check_input(x.shape())?;
        let f1 = self.stages[0].forward_train(x)?;
        let f2 = self.stages[1].forward_train(&f1)?;
        let f3 = self.stages[2].forward_train(&f2)?;
        let f4 = self.stages[3].forward_train(&f3)?;
        Ok(FeaturePyramid { f1, f2, f3, f4 })
    }

    /// Back-propagates per-stage output gradients (`None` = no gradient) and
    /// returns the input gradient, or `None` if no stage received one.
    pub fn backward(&mut self, grads: [Option<Tensor4<T>>; 4]) -> Result<Option<Tensor4<T>>> {
        let mut carry: Option<Tensor4<T>> = None;
        for (stage, g) in self.stages.iter_mut().zip(grads).rev() {
            let total = match (g, carry.take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            carry = match total {
                Some(g) => Some(stage.backward(&g)?),
                None => None,
            };
        }
        Ok(carry)
    }
}
