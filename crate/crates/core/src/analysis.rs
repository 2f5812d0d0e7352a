//! Parameter and multiply-accumulate counts.
//!
//! Counting convention for MACs, per image, multiplied by the batch size:
//!
//! | operation           | MACs                                        |
//! |---------------------|---------------------------------------------|
//! | convolution         | `out_h * out_w * out_c * in_c * k^2 / groups` |
//! | linear on tokens    | `tokens * in * out`                          |
//! | attention `Q K^T`   | `heads * l_q * l_kv * d_head`                |
//! | attention `A V`     | `heads * l_q * l_kv * d_head`                |
//! | norms, activations, softmax, upsampling, pooling, residual adds | 0 |
//!
//! Stage 4 of the encoder is counted even though the head does not read it.
//! Parameters are trainable scalars only; batch-norm running statistics are
//! excluded.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{trainable_count, ConvSpec, Reduction, Visit};
use crate::error::Result;
use crate::model::PvtFormerConfig;
use crate::tensor::{Real, Shape4};

/// Runtime enumeration of trainable scalars.
pub fn count_params<T: Real>(model: &impl Visit<T>) -> usize {
    trainable_count(model)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub input: Shape4,
    pub params: u64,
    pub macs: u64,
    pub modules: Vec<ModuleCost>,
}

#[derive(Default)]
struct Tally {
    params: u64,
    macs: u64,
}

impl Tally {
    fn conv(&mut self, spec: ConvSpec, oh: usize, ow: usize) {
        self.params += spec.param_count() as u64;
        self.macs += spec.macs(oh, ow);
    }

    fn linear(&mut self, tokens: usize, i: usize, o: usize) {
        self.params += (i * o + o) as u64;
        self.macs += (tokens * i * o) as u64;
    }

    fn norm(&mut self, c: usize) {
        self.params += 2 * c as u64;
    }
}

struct Builder {
    batch: u64,
    modules: Vec<ModuleCost>,
}

impl Builder {
    fn push(&mut self, name: String, t: Tally) {
        self.modules.push(ModuleCost {
            name,
            params: t.params,
            macs: t.macs * self.batch,
        });
    }
}

fn conv_bn(t: &mut Tally, in_c: usize, out_c: usize, k: usize, hw: (usize, usize)) {
    let pad = k / 2;
    t.conv(ConvSpec::new(in_c, out_c, k).pad(pad).no_bias(), hw.0, hw.1);
    t.norm(out_c);
}

fn residual(t: &mut Tally, in_c: usize, out_c: usize, hw: (usize, usize)) {
    conv_bn(t, in_c, out_c, 3, hw);
    conv_bn(t, out_c, out_c, 3, hw);
    if in_c != out_c {
        conv_bn(t, in_c, out_c, 1, hw);
    }
}

/// Closed-form parameter and MAC count derived from the configuration alone.
pub fn complexity(config: &PvtFormerConfig, input: Shape4) -> Result<ComplexityReport> {
    config.validate()?;
    let enc = &config.encoder;
    enc.check_input(input)?;
    let mut b = Builder {
        batch: input.n as u64,
        modules: Vec::new(),
    };
    let grids = enc.stage_grids(input.h, input.w);
    let mut in_c = enc.in_channels;
    for (i, &(gh, gw)) in grids.iter().enumerate() {
        let d = enc.embed_dims[i];
        let l = gh * gw;
        let p = enc.patches[i];

        let mut t = Tally::default();
        t.conv(ConvSpec::new(in_c, d, p.kernel).stride(p.stride).pad(p.pad), gh, gw);
        t.norm(d);
        b.push(format!("encoder.stages.{i}.patch_embed"), t);

        let heads = enc.heads[i];
        let hidden = d * enc.mlp_ratios[i];
        let red = enc.reduction(i);
        let (kh, kw) = red.kv_grid(gh, gw);
        let lkv = kh * kw;
        for j in 0..enc.depths[i] {
            let mut t = Tally::default();
            t.norm(d);
            t.linear(l, d, d);
            match red {
                Reduction::Conv(1) => t.linear(l, d, 2 * d),
                Reduction::Conv(r) => {
                    t.conv(ConvSpec::new(d, d, r).stride(r), kh, kw);
                    t.norm(d);
                    t.linear(lkv, d, 2 * d);
                }
                Reduction::Pool => {
                    t.conv(ConvSpec::new(d, d, 1), kh, kw);
                    t.norm(d);
                    t.linear(lkv, d, 2 * d);
                }
            }
            let dh = d / heads;
            t.macs += 2 * (heads * l * lkv * dh) as u64;
            t.linear(l, d, d);
            t.norm(d);
            t.linear(l, d, hidden);
            t.conv(ConvSpec::new(hidden, hidden, 3).pad(1).groups(hidden), gh, gw);
            t.linear(l, hidden, d);
            b.push(format!("encoder.stages.{i}.blocks.{j}"), t);
        }

        let mut t = Tally::default();
        t.norm(d);
        b.push(format!("encoder.stages.{i}.norm"), t);
        in_c = d;
    }

    let rc = config.reduce_c;
    let full = (input.h, input.w);
    for i in 0..3 {
        let mut t = Tally::default();
        conv_bn(&mut t, enc.embed_dims[i], rc, 1, grids[i]);
        b.push(format!("reducers.{i}"), t);
    }
    for i in 0..3 {
        let mut t = Tally::default();
        residual(&mut t, rc, rc, full);
        b.push(format!("up_blocks.{i}"), t);
    }
    // decoders.0 refines at the stage-2 grid, decoders.1 at the stage-1 grid.
    for (i, hw) in [grids[1], grids[0]].into_iter().enumerate() {
        let mut t = Tally::default();
        residual(&mut t, 2 * rc, rc, hw);
        b.push(format!("decoders.{i}"), t);
    }
    let mut t = Tally::default();
    residual(&mut t, 4 * rc, config.head_channels, full);
    b.push("fuse".into(), t);
    let mut t = Tally::default();
    t.conv(ConvSpec::new(config.head_channels, 1, 1), full.0, full.1);
    b.push("head".into(), t);

    let params = b.modules.iter().map(|m| m.params).sum();
    let macs = b.modules.iter().map(|m| m.macs).sum();
    Ok(ComplexityReport {
        input,
        params,
        macs,
        modules: b.modules,
    })
}

pub fn count_macs(config: &PvtFormerConfig, input: Shape4) -> Result<u64> {
    Ok(complexity(config, input)?.macs)
}

/// Closed-form trainable parameter count.
pub fn closed_form_params(config: &PvtFormerConfig) -> Result<u64> {
    let s = config.input_shape(1);
    Ok(complexity(config, s)?.params)
}

impl ComplexityReport {
    /// Per-module totals collapsed to the first `depth` name components.
    pub fn grouped(&self, depth: usize) -> Vec<ModuleCost> {
        let mut out: Vec<ModuleCost> = Vec::new();
        for m in &self.modules {
            let key = m.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            match out.last_mut() {
                Some(last) if last.name == key => {
                    last.params += m.params;
                    last.macs += m.macs;
                }
                _ => out.push(ModuleCost {
                    name: key,
                    params: m.params,
                    macs: m.macs,
                }),
            }
        }
        out
    }

    /// Aligned text table grouped to stage level.
    pub fn to_table(&self) -> String {
        let rows = self.grouped(3);
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>18}", "module", "params", "MACs");
        for r in &rows {
            let _ = writeln!(s, "{:<width$}  {:>14}  {:>18}", r.name, r.params, r.macs);
        }
        let _ = writeln!(s, "{:<width$}  {:>14}  {:>18}", "total", self.params, self.macs);
        let _ = writeln!(
            s,
            "input {}: {:.2} M params, {:.2} GMac",
            self.input,
            self.params as f64 / 1e6,
            self.macs as f64 / 1e9
        );
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PvtFormer;

    #[test]
    fn pointwise_conv_example() {
        let spec = ConvSpec::new(320, 64, 1);
        assert_eq!(spec.macs(16, 16), 5_242_880);
        assert_eq!(ConvSpec::new(64, 64, 3).no_bias().param_count(), 36_864);
    }

    #[test]
    fn tiny_closed_form_matches_runtime() {
        let cfg = PvtFormerConfig::tiny();
        let model = PvtFormer::<f32>::new(&cfg, 0).unwrap();
        assert_eq!(count_params(&model) as u64, closed_form_params(&cfg).unwrap());
    }

    #[test]
    fn totals_are_sums_and_params_input_invariant() {
        let cfg = PvtFormerConfig::tiny();
        let a = complexity(&cfg, Shape4::new(1, 3, 64, 64)).unwrap();
        let b = complexity(&cfg, Shape4::new(2, 3, 128, 128)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.macs, a.modules.iter().map(|m| m.macs).sum::<u64>());
        assert!(b.macs > 4 * a.macs);
        assert!(complexity(&cfg, Shape4::new(1, 3, 60, 64)).is_err());
    }

    #[test]
    fn table_lists_totals() {
        let r = complexity(&PvtFormerConfig::tiny(), Shape4::new(1, 3, 64, 64)).unwrap();
        let t = r.to_table();
        assert!(t.contains("encoder.stages.0"));
        assert!(t.contains("total"));
    }
}
