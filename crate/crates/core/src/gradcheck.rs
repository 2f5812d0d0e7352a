//! Central finite-difference verification of every hand-written backward
//! pass, in double precision.
//!
//! Each check draws an input and, unless the block has its own loss, a fixed
//! random probe `R`; the scalar objective is `sum(R * forward_train(x))`.
//! Backprop gradients are compared against `(L(θ + h) - L(θ - h)) / 2h` at
//! random parameter and input coordinates.
//!
//! ReLU makes the objective piecewise smooth. The activation pattern of the
//! base forward pass is recorded and replayed during every nudged pass, so
//! the differences are taken on the branch the backward pass differentiates.
//! As a second guard, a coordinate whose estimates at steps `h` and `h / 2`
//! disagree is redrawn and counted. A wrong backward pass still fails: both
//! estimates then agree with each other but not with backprop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::act::{tape_clear, tape_record, tape_rewind};
use crate::blocks::{
    zero_grads, BatchNorm2d, Conv2d, ConvBnRelu, ConvFfn, ConvSpec, Init, LayerNorm, Linear,
    OverlapPatchEmbed, Param, Reduction, ResidualBlock, SpatialReductionAttention,
    TransformerBlock, Upsample, Visit,
};
use crate::encoder::{PvtV2Config, PvtV2Encoder};
use crate::error::Result;
use crate::losses::{combined_loss_with_grad, LossConfig};
use crate::model::{DecoderBlock, PvtFormer, PvtFormerConfig, UpBlock};
use crate::tensor::{Shape4, Tensor4, Tokens};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Parameter coordinates per block (input coordinates are added on top).
    pub param_coords: usize,
    pub input_coords: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            param_coords: 20,
            input_coords: 10,
            step: 1e-4,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: String,
    /// Coordinates compared against backprop.
    pub coords: usize,
    /// Coordinates discarded because the function was not smooth across
    /// the difference stencil.
    pub redrawn: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error.
    pub worst: String,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    const FLOOR: f64 = 1e-7;
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

trait Flat: Clone {
    fn flat(&self) -> Vec<f64>;
    fn unflat(&self, v: Vec<f64>) -> Self;
}

impl Flat for Tensor4<f64> {
    fn flat(&self) -> Vec<f64> {
        self.data().to_vec()
    }
    fn unflat(&self, v: Vec<f64>) -> Self {
        Tensor4::from_vec(self.shape(), v).expect("same shape")
    }
}

impl Flat for Tokens<f64> {
    fn flat(&self) -> Vec<f64> {
        self.data.clone()
    }
    fn unflat(&self, v: Vec<f64>) -> Self {
        self.with_data(self.d, v)
    }
}

impl Flat for Vec<Tensor4<f64>> {
    fn flat(&self) -> Vec<f64> {
        self.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
    fn unflat(&self, v: Vec<f64>) -> Self {
        let mut off = 0;
        self.iter()
            .map(|t| {
                let n = t.data().len();
                let out = t.unflat(v[off..off + n].to_vec());
                off += n;
                out
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, s: Shape4) -> Tensor4<f64> {
    Tensor4::from_vec(s, uniform(rng, s.numel(), -1.0, 1.0)).expect("shape")
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, d: usize) -> Tokens<f64> {
    Tokens::from_vec(n, h, w, d, uniform(rng, n * h * w * d, -1.0, 1.0)).expect("shape")
}

/// Scalar objective and its gradient with respect to the block output.
type LossFn<'a, O> = Box<dyn Fn(&O) -> Result<(f64, O)> + 'a>;

fn probe_loss<'a, O: Flat + 'a>(rng: &mut ChaCha8Rng) -> impl FnMut(&O) -> LossFn<'a, O> {
    let seed: u64 = rng.gen();
    move |y: &O| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let probe = y.unflat(uniform(&mut r, y.flat().len(), -1.0, 1.0));
        let p = probe.flat();
        Box::new(move |out: &O| {
            let v: f64 = out.flat().iter().zip(&p).map(|(a, b)| a * b).sum();
            Ok((v, out.unflat(p.clone())))
        })
    }
}

fn nudge<M: Visit<f64>>(m: &mut M, target: &str, idx: usize, delta: f64) {
    m.visit_mut("", &mut |name, p| {
        if name == target {
            p.value[idx] += delta;
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn check<M, I, O>(
    block: &str,
    m: &mut M,
    x: &I,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
    make_loss: &mut dyn FnMut(&O) -> LossFn<'static, O>,
    fwd: impl Fn(&mut M, &I) -> Result<O>,
    bwd: impl Fn(&mut M, &O) -> Result<Option<I>>,
) -> Result<BlockReport>
where
    M: Visit<f64>,
    I: Flat,
    O: Flat + 'static,
{
    zero_grads(m);
    tape_record();
    let base = fwd(m, x);
    tape_rewind();
    let result = base.and_then(|y| check_at(block, m, x, y, opts, rng, make_loss, &fwd, bwd));
    tape_clear();
    result
}

#[allow(clippy::too_many_arguments)]
fn check_at<M, I, O>(
    block: &str,
    m: &mut M,
    x: &I,
    y: O,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
    make_loss: &mut dyn FnMut(&O) -> LossFn<'static, O>,
    fwd: &impl Fn(&mut M, &I) -> Result<O>,
    bwd: impl Fn(&mut M, &O) -> Result<Option<I>>,
) -> Result<BlockReport>
where
    M: Visit<f64>,
    I: Flat,
    O: Flat + 'static,
{
    let loss = make_loss(&y);
    let (_, dy) = loss(&y)?;
    let dx = bwd(m, &dy)?;
    let has_input = dx.is_some();

    let mut tensors: Vec<(String, usize)> = Vec::new();
    m.visit("", &mut |name, p: &Param<f64>| {
        if p.is_trainable() && !p.is_empty() {
            tensors.push((name.to_string(), p.len()));
        }
    });
    let analytic = |m: &M, target: &str, idx: usize| {
        let mut g = 0.0;
        m.visit("", &mut |name, p| {
            if name == target {
                g = p.grad().get(idx).copied().unwrap_or(0.0);
            }
        });
        g
    };

    let h = opts.step;
    let eval = |m: &mut M, x: &I| -> Result<f64> { Ok(loss(&fwd(m, x)?)?.0) };
    let mut worst = (0.0f64, String::from("-"));
    let mut checked = 0usize;
    let mut redrawn = 0usize;
    let mut record = |label: String, a: f64, n: f64| {
        let e = rel_err(a, n);
        if e > worst.0 || worst.1 == "-" {
            worst = (e, format!("{label} (backprop {a:.6e}, numeric {n:.6e})"));
        }
    };
    // Central differences at `h` and `h / 2`. When they disagree the stencil
    // straddles a kink (ReLU) and the coordinate is redrawn.
    let smooth = |fd: f64, fd_half: f64| rel_err(fd, fd_half) < opts.tolerance / 4.0;
    let max_draws = 10 * (opts.param_coords + opts.input_coords).max(1);

    if !tensors.is_empty() {
        let mut accepted = 0;
        while accepted < opts.param_coords && checked + redrawn < max_draws {
            let (target, len) = &tensors[rng.gen_range(0..tensors.len())];
            let idx = rng.gen_range(0..*len);
            let fd = |m: &mut M, step: f64| -> Result<f64> {
                nudge(m, target, idx, step);
                let up = eval(m, x)?;
                nudge(m, target, idx, -2.0 * step);
                let down = eval(m, x)?;
                nudge(m, target, idx, step);
                Ok((up - down) / (2.0 * step))
            };
            let (full, half) = (fd(m, h)?, fd(m, h / 2.0)?);
            if !smooth(full, half) {
                redrawn += 1;
                continue;
            }
            record(format!("{target}[{idx}]"), analytic(m, target, idx), full);
            accepted += 1;
            checked += 1;
        }
    }

    if let Some(dx) = dx {
        let base = x.flat();
        let g = dx.flat();
        let want = if tensors.is_empty() {
            opts.param_coords.max(opts.input_coords)
        } else {
            opts.input_coords
        };
        let mut accepted = 0;
        let mut draws = 0;
        while accepted < want && draws < max_draws {
            draws += 1;
            let i = rng.gen_range(0..base.len());
            let fd = |m: &mut M, step: f64| -> Result<f64> {
                let mut v = base.clone();
                v[i] += step;
                let up = eval(m, &x.unflat(v.clone()))?;
                v[i] -= 2.0 * step;
                let down = eval(m, &x.unflat(v))?;
                Ok((up - down) / (2.0 * step))
            };
            let (full, half) = (fd(m, h)?, fd(m, h / 2.0)?);
            if !smooth(full, half) {
                redrawn += 1;
                continue;
            }
            record(format!("input[{i}]"), g[i], full);
            accepted += 1;
            checked += 1;
        }
    }

    let wanted = if tensors.is_empty() {
        opts.param_coords.max(opts.input_coords)
    } else {
        opts.param_coords + if has_input { opts.input_coords } else { 0 }
    };
    Ok(BlockReport {
        block: block.to_string(),
        coords: checked,
        redrawn,
        max_rel_err: worst.0,
        worst: worst.1,
        passed: checked >= wanted && worst.0 < opts.tolerance,
    })
}

/// Parameter-free wrapper so the resampler goes through the same harness.
struct NoParams;

impl Visit<f64> for NoParams {
    fn visit(&self, _: &str, _: &mut dyn FnMut(&str, &Param<f64>)) {}
    fn visit_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param<f64>)) {}
}

/// Names of the blocks covered by [`run_suite`], in order.
pub const BLOCKS: [&str; 21] = [
    "conv2d",
    "conv2d_strided",
    "conv2d_depthwise",
    "batch_norm2d",
    "layer_norm",
    "linear",
    "bilinear_upsample",
    "conv_bn_relu_1x1",
    "residual_block",
    "residual_block_projection",
    "overlap_patch_embed",
    "sra_attention",
    "sra_attention_sr1",
    "sra_attention_pooled",
    "conv_ffn",
    "transformer_block",
    "up_block",
    "decoder_block",
    "pvt_v2_encoder_tiny",
    "pvtformer_tiny_probe",
    "pvtformer_tiny_combined_loss",
];

/// Runs one named check.
pub fn run_block(name: &str, opts: &GradCheckOptions) -> Result<BlockReport> {
    let idx = BLOCKS.iter().position(|b| *b == name).unwrap_or(usize::MAX) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(idx);
    let mut init = Init::new(opts.seed.wrapping_add(idx));
    // Wider than the training init so signals stay well above rounding noise.
    init.std = 0.3;
    let r = &mut rng;

    macro_rules! t4 {
        ($m:expr, $x:expr) => {{
            let mut loss = probe_loss::<Tensor4<f64>>(r);
            check(
                name,
                &mut $m,
                &$x,
                opts,
                r,
                &mut loss,
                |m, x| m.forward_train(x),
                |m, dy| m.backward(dy).map(Some),
            )
        }};
    }
    macro_rules! tok {
        ($m:expr, $x:expr) => {{
            let mut loss = probe_loss::<Tokens<f64>>(r);
            check(
                name,
                &mut $m,
                &$x,
                opts,
                r,
                &mut loss,
                |m, x| m.forward_train(x),
                |m, dy| m.backward(dy).map(Some),
            )
        }};
    }

    match name {
        "conv2d" => {
            let mut m = Conv2d::new(ConvSpec::new(3, 4, 3).pad(1), &mut init)?;
            let x = tensor(r, Shape4::new(2, 3, 5, 6));
            t4!(m, x)
        }
        "conv2d_strided" => {
            let mut m = Conv2d::new(ConvSpec::new(3, 4, 3).stride(2).pad(1), &mut init)?;
            let x = tensor(r, Shape4::new(2, 3, 7, 6));
            t4!(m, x)
        }
        "conv2d_depthwise" => {
            let mut m = Conv2d::new(ConvSpec::new(4, 4, 3).pad(1).groups(4), &mut init)?;
            let x = tensor(r, Shape4::new(2, 4, 5, 5));
            t4!(m, x)
        }
        "batch_norm2d" => {
            let mut m = BatchNorm2d::new(3, &mut init);
            let x = tensor(r, Shape4::new(3, 3, 4, 4));
            t4!(m, x)
        }
        "layer_norm" => {
            let mut m = LayerNorm::new(8, 1e-6, &mut init);
            let x = tokens(r, 2, 4, 4, 8);
            tok!(m, x)
        }
        "linear" => {
            let mut m = Linear::new(8, 6, &mut init);
            let x = tokens(r, 2, 4, 4, 8);
            tok!(m, x)
        }
        "bilinear_upsample" => {
            let x = tensor(r, Shape4::new(2, 2, 3, 4));
            let mut loss = probe_loss::<Tensor4<f64>>(r);
            check(
                name,
                &mut NoParams,
                &x,
                opts,
                r,
                &mut loss,
                |_, x| Upsample::default().forward_train(x, 7, 9),
                |_, dy| {
                    let mut u = Upsample::default();
                    u.forward_train(&x, 7, 9)?;
                    u.backward(dy).map(Some)
                },
            )
        }
        "conv_bn_relu_1x1" => {
            let mut m = ConvBnRelu::new(6, 4, &mut init)?;
            let x = tensor(r, Shape4::new(2, 6, 4, 4));
            t4!(m, x)
        }
        "residual_block" => {
            let mut m = ResidualBlock::new(4, 4, &mut init)?;
            let x = tensor(r, Shape4::new(2, 4, 5, 5));
            t4!(m, x)
        }
        "residual_block_projection" => {
            let mut m = ResidualBlock::new(6, 4, &mut init)?;
            let x = tensor(r, Shape4::new(2, 6, 4, 4));
            t4!(m, x)
        }
        "overlap_patch_embed" => {
            let mut m = OverlapPatchEmbed::new(3, 8, 7, 4, 3, &mut init)?;
            let x = tensor(r, Shape4::new(2, 3, 16, 16));
            let mut loss = probe_loss::<Tokens<f64>>(r);
            check(
                name,
                &mut m,
                &x,
                opts,
                r,
                &mut loss,
                |m, x| m.forward_train(x),
                |m, dy| m.backward(dy).map(Some),
            )
        }
        "sra_attention" => {
            let mut m = SpatialReductionAttention::new(8, 2, Reduction::Conv(2), &mut init)?;
            let x = tokens(r, 2, 4, 4, 8);
            tok!(m, x)
        }
        "sra_attention_sr1" => {
            let mut m = SpatialReductionAttention::new(8, 2, Reduction::Conv(1), &mut init)?;
            let x = tokens(r, 2, 4, 4, 8);
            tok!(m, x)
        }
        "sra_attention_pooled" => {
            let mut m = SpatialReductionAttention::new(8, 2, Reduction::Pool, &mut init)?;
            let x = tokens(r, 2, 9, 10, 8);
            tok!(m, x)
        }
        "conv_ffn" => {
            let mut m = ConvFfn::new(8, 16, &mut init)?;
            let x = tokens(r, 2, 4, 4, 8);
            tok!(m, x)
        }
        "transformer_block" => {
            let mut m = TransformerBlock::new(8, 2, Reduction::Conv(2), 2, &mut init)?;
            let x = tokens(r, 2, 4, 4, 8);
            tok!(m, x)
        }
        "up_block" => {
            let mut m = UpBlock::new(4, &mut init)?;
            let x = tensor(r, Shape4::new(2, 4, 3, 3));
            let mut loss = probe_loss::<Tensor4<f64>>(r);
            check(
                name,
                &mut m,
                &x,
                opts,
                r,
                &mut loss,
                |m, x| m.forward_train(x, 6, 6),
                |m, dy| m.backward(dy).map(Some),
            )
        }
        "decoder_block" => {
            let skip = tensor(r, Shape4::new(2, 4, 6, 6));
            let mut m = DecoderBlock::new(4, 4, 4, &mut init)?;
            let x = tensor(r, Shape4::new(2, 4, 3, 3));
            let mut loss = probe_loss::<Tensor4<f64>>(r);
            check(
                name,
                &mut m,
                &x,
                opts,
                r,
                &mut loss,
                |m, x| m.forward_train(x, &skip),
                |m, dy| m.backward(dy).map(|(low, _)| Some(low)),
            )
        }
        "pvt_v2_encoder_tiny" => {
            let mut m = PvtV2Encoder::new(&PvtV2Config::tiny(), &mut init)?;
            let x = tensor(r, Shape4::new(2, 3, 32, 32));
            let mut loss = probe_loss::<Vec<Tensor4<f64>>>(r);
            check(
                name,
                &mut m,
                &x,
                opts,
                r,
                &mut loss,
                |m, x| {
                    let p = m.forward_train(x)?;
                    Ok(vec![p.f1, p.f2, p.f3, p.f4])
                },
                |m, dy| {
                    let g: [Option<Tensor4<f64>>; 4] = [
                        Some(dy[0].clone()),
                        Some(dy[1].clone()),
                        Some(dy[2].clone()),
                        Some(dy[3].clone()),
                    ];
                    m.backward(g)
                },
            )
        }
        "pvtformer_tiny_probe" => {
            let mut m = PvtFormer::<f64>::new(&PvtFormerConfig::tiny(), opts.seed)?;
            let x = tensor(r, Shape4::new(2, 3, 32, 32));
            t4!(m, x)
        }
        "pvtformer_tiny_combined_loss" => {
            let mut m = PvtFormer::<f64>::new(&PvtFormerConfig::tiny(), opts.seed)?;
            let s = Shape4::new(2, 3, 32, 32);
            let x = Tensor4::from_vec(s, uniform(r, s.numel(), 0.0, 1.0))?;
            let target = Tensor4::from_fn(Shape4::new(2, 1, 32, 32), |n, _, y, xx| {
                let (dy, dx) = (y as f64 - 16.0 - n as f64, xx as f64 - 14.0);
                f64::from(u8::from(dy * dy + dx * dx < 80.0))
            });
            let cfg = LossConfig::default();
            let mut loss = move |_: &Tensor4<f64>| -> LossFn<'static, Tensor4<f64>> {
                let target = target.clone();
                Box::new(move |z: &Tensor4<f64>| {
                    let (v, g) = combined_loss_with_grad(z, &target, &cfg)?;
                    Ok((v.total, g))
                })
            };
            check(
                name,
                &mut m,
                &x,
                opts,
                r,
                &mut loss,
                |m, x| m.forward_train(x),
                |m, dy| m.backward(dy).map(Some),
            )
        }
        other => Err(crate::error::invalid!("unknown gradient-check block `{other}`")),
    }
}

/// Every block in [`BLOCKS`].
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<BlockReport>> {
    BLOCKS.iter().map(|b| run_block(b, opts)).collect()
}
