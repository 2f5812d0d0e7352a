//! Binary cross-entropy plus soft Dice.
//!
//! Reductions are accumulated in `f64` regardless of the tensor element type.

use serde::{Deserialize, Serialize};

use crate::blocks::act::sigmoid;
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            bce_weight: 1.0,
            dice_weight: 1.0,
            smooth: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
}

fn check_pair<T: Real>(a: &Tensor4<T>, target: &Tensor4<T>) -> Result<()> {
    ensure!(
        a.shape() == target.shape(),
        "loss shape mismatch: {} vs target {}",
        a.shape(),
        target.shape()
    );
    ensure!(
        target.data().iter().all(|&y| y == T::zero() || y == T::one()),
        "targets must be binary"
    );
    Ok(())
}

#[inline]
fn bce_term(z: f64, y: f64) -> f64 {
    (-z.abs()).exp().ln_1p() + z.max(0.0) - z * y
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// `log(1 + exp(-|z|)) + max(z, 0) - z*y`.
pub fn bce_loss<T: Real>(logits: &Tensor4<T>, target: &Tensor4<T>) -> Result<f64> {
    check_pair(logits, target)?;
    let n = logits.data().len().max(1) as f64;
    let sum: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &y)| bce_term(z.to_f64_lossy(), y.to_f64_lossy()))
        .sum();
    Ok(sum / n)
}

/// Per-sample `(Σpy, Σp, Σy)`.
fn dice_sums<T: Real>(probs: &Tensor4<T>, target: &Tensor4<T>) -> Vec<(f64, f64, f64)> {
    (0..probs.shape().n)
        .map(|i| {
            probs
                .image(i)
                .iter()
                .zip(target.image(i))
                .fold((0.0, 0.0, 0.0), |(inter, sp, sy), (&p, &y)| {
                    let (p, y) = (p.to_f64_lossy(), y.to_f64_lossy());
                    (inter + p * y, sp + p, sy + y)
                })
        })
        .collect()
}

/// `1 - (2Σpy + s) / (Σp + Σy + s)` per sample, averaged over the batch.
pub fn soft_dice_loss<T: Real>(probs: &Tensor4<T>, target: &Tensor4<T>, smooth: f64) -> Result<f64> {
    check_pair(probs, target)?;
    ensure!(smooth >= 0.0, "smooth must be non-negative");
    ensure!(
        probs
            .data()
            .iter()
            .all(|&p| p >= T::zero() && p <= T::one()),
        "probabilities must lie in [0, 1]"
    );
    let sums = dice_sums(probs, target);
    let n = sums.len().max(1) as f64;
    Ok(sums
        .iter()
        .map(|&(i, p, y)| dice_from_sums(i, p, y, smooth))
        .sum::<f64>()
        / n)
}

fn dice_from_sums(inter: f64, sp: f64, sy: f64, smooth: f64) -> f64 {
    let den = sp + sy + smooth;
    if den == 0.0 {
        0.0
    } else {
        1.0 - (2.0 * inter + smooth) / den
    }
}

/// Unit-weight BCE plus Dice on `sigmoid(logits)`.
pub fn combined_loss<T: Real>(logits: &Tensor4<T>, target: &Tensor4<T>) -> Result<LossValue> {
    Ok(combined_loss_with_grad(logits, target, &LossConfig::default())?.0)
}

/// Weighted loss and its gradient with respect to the logits.
pub fn combined_loss_with_grad<T: Real>(
    logits: &Tensor4<T>,
    target: &Tensor4<T>,
    cfg: &LossConfig,
) -> Result<(LossValue, Tensor4<T>)> {
    check_pair(logits, target)?;
    ensure!(cfg.smooth >= 0.0, "smooth must be non-negative");
    let count = logits.data().len().max(1) as f64;
    let probs = logits.map(sigmoid);

    let mut bce = 0.0;
    for (&z, &y) in logits.data().iter().zip(target.data()) {
        bce += bce_term(z.to_f64_lossy(), y.to_f64_lossy());
    }
    bce /= count;

    let sums = dice_sums(&probs, target);
    let batch = sums.len().max(1) as f64;
    let dice = sums
        .iter()
        .map(|&(i, p, y)| dice_from_sums(i, p, y, cfg.smooth))
        .sum::<f64>()
        / batch;

    let mut grad = Tensor4::zeros(logits.shape());
    let plane = logits.shape().numel() / logits.shape().n.max(1);
    for (s, &(inter, sp, sy)) in sums.iter().enumerate() {
        let den = sp + sy + cfg.smooth;
        let num = 2.0 * inter + cfg.smooth;
        let range = s * plane..(s + 1) * plane;
        let g = &mut grad.data_mut()[range.clone()];
        for ((g, &p), &y) in g
            .iter_mut()
            .zip(&probs.data()[range.clone()])
            .zip(&target.data()[range])
        {
            let (p, y) = (p.to_f64_lossy(), y.to_f64_lossy());
            let d_bce = (p - y) / count;
            let d_dice_dp = if den == 0.0 {
                0.0
            } else {
                -(2.0 * y * den - num) / (den * den) / batch
            };
            *g = T::lit(cfg.bce_weight * d_bce + cfg.dice_weight * d_dice_dp * p * (1.0 - p));
        }
    }
    let value = LossValue {
        total: cfg.bce_weight * bce + cfg.dice_weight * dice,
        bce,
        dice,
    };
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    fn one(v: f64) -> Tensor4<f64> {
        Tensor4::filled(Shape4::new(1, 1, 1, 1), v)
    }

    #[test]
    fn bce_reference_values() {
        assert!((bce_loss(&one(0.0), &one(1.0)).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let hi = bce_loss(&one(20.0), &one(1.0)).unwrap();
        assert!((hi - 2.061e-9).abs() < 1e-11, "{hi}");
        let lo = bce_loss(&one(-20.0), &one(1.0)).unwrap();
        assert!((lo - 20.0).abs() < 1e-8);
        let huge = bce_loss(&one(-1e4), &one(1.0)).unwrap();
        assert!(huge.is_finite());
    }

    #[test]
    fn dice_reference_values() {
        let s = Shape4::new(1, 1, 2, 2);
        let half = Tensor4::filled(s, 0.5);
        let ones = Tensor4::filled(s, 1.0);
        let zeros = Tensor4::<f64>::zeros(s);
        assert!((soft_dice_loss(&half, &ones, 1.0).unwrap() - 2.0 / 7.0).abs() < 1e-12);
        assert_eq!(soft_dice_loss(&zeros, &zeros, 1.0).unwrap(), 0.0);
        assert_eq!(soft_dice_loss(&ones, &ones, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor4::<f64>::zeros(Shape4::new(1, 1, 2, 2));
        let b = Tensor4::<f64>::zeros(Shape4::new(1, 1, 2, 3));
        assert!(bce_loss(&a, &b).is_err());
        assert!(soft_dice_loss(&a, &b, 1.0).is_err());
        assert!(combined_loss(&a, &b).is_err());
    }

    #[test]
    fn perfect_logits_give_near_zero_total() {
        let y = Tensor4::from_fn(Shape4::new(2, 1, 4, 4), |n, _, i, j| ((n + i + j) % 2) as f64);
        let z = y.map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        let l = combined_loss(&z, &y).unwrap();
        assert!(l.total < 1e-6 && l.total >= 0.0, "{l:?}");
        assert!((l.total - l.bce - l.dice).abs() < 1e-15);
    }
}
