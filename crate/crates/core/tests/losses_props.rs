use proptest::prelude::*;
use pvtformer::losses::{bce_loss, combined_loss, combined_loss_with_grad, soft_dice_loss, LossConfig};
use pvtformer::{Shape4, Tensor4};

fn t(n: usize, h: usize, w: usize, v: Vec<f64>) -> Tensor4<f64> {
    Tensor4::from_vec(Shape4::new(n, 1, h, w), v).unwrap()
}

fn logits_and_target(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            proptest::collection::vec(-6.0f64..6.0, h * w),
            proptest::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), h * w),
        )
    })
}

#[test]
fn hand_computed_values() {
    let z = t(1, 1, 1, vec![0.0]);
    let y = t(1, 1, 1, vec![1.0]);
    assert!((bce_loss(&z, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    let big = bce_loss(&t(1, 1, 1, vec![20.0]), &y).unwrap();
    assert!((big - 2.061e-9).abs() < 1e-12, "{big}");
    assert!((bce_loss(&t(1, 1, 1, vec![-20.0]), &y).unwrap() - 20.0).abs() < 1e-8);

    let p = t(1, 2, 2, vec![0.5; 4]);
    let ones = t(1, 2, 2, vec![1.0; 4]);
    assert!((soft_dice_loss(&p, &ones, 1.0).unwrap() - 2.0 / 7.0).abs() < 1e-12);
    let zeros = t(1, 2, 2, vec![0.0; 4]);
    assert_eq!(soft_dice_loss(&zeros, &zeros, 1.0).unwrap(), 0.0);
}

#[test]
fn dice_is_per_sample_then_averaged() {
    // Sample 0 perfect (loss 0), sample 1 is the 2/7 case.
    let p = t(2, 2, 2, vec![1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5]);
    let y = t(2, 2, 2, vec![1.0; 8]);
    assert!((soft_dice_loss(&p, &y, 1.0).unwrap() - 1.0 / 7.0).abs() < 1e-12);
}

#[test]
fn shape_mismatch_and_nonbinary_targets_rejected() {
    let a = t(1, 2, 2, vec![0.0; 4]);
    let b = t(1, 1, 4, vec![0.0; 4]);
    assert!(bce_loss(&a, &b).is_err());
    assert!(bce_loss(&a, &t(1, 2, 2, vec![0.3; 4])).is_err());
}

#[test]
fn perfect_predictions_cost_nothing() {
    for y in [vec![0.0; 16], vec![1.0; 16], (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect()] {
        let z: Vec<f64> = y.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect();
        let l = combined_loss(&t(1, 4, 4, z), &t(1, 4, 4, y)).unwrap();
        assert!(l.total < 1e-6, "{l:?}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let z: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 / 2.0 - 2.5).collect();
    let y: Vec<f64> = (0..32).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
    let cfg = LossConfig::default();
    let target = t(2, 4, 4, y);
    let (_, g) = combined_loss_with_grad(&t(2, 4, 4, z.clone()), &target, &cfg).unwrap();
    let h = 1e-5;
    for i in 0..z.len() {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += h;
        zm[i] -= h;
        let lp = combined_loss(&t(2, 4, 4, zp), &target).unwrap().total;
        let lm = combined_loss(&t(2, 4, 4, zm), &target).unwrap().total;
        let fd = (lp - lm) / (2.0 * h);
        let a = g.data()[i];
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
        assert!(err < 1e-3, "coordinate {i}: analytic {a} vs numeric {fd}");
    }
}

proptest! {
    #[test]
    fn components_consistent((h, w, z, y) in logits_and_target(8)) {
        let l = combined_loss(&t(1, h, w, z), &t(1, h, w, y)).unwrap();
        prop_assert!(l.bce >= 0.0);
        prop_assert!((0.0..=1.0).contains(&l.dice));
        prop_assert!((l.total - (l.bce + l.dice)).abs() < 1e-12);
    }

    #[test]
    fn permutation_invariant((h, w, z, y) in logits_and_target(8), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..z.len()).collect();
        idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let zp: Vec<f64> = idx.iter().map(|&i| z[i]).collect();
        let yp: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let a = combined_loss(&t(1, h, w, z), &t(1, h, w, y)).unwrap().total;
        let b = combined_loss(&t(1, h, w, zp), &t(1, h, w, yp)).unwrap().total;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn joint_translation_invariant((h, w, z, y) in logits_and_target(6), dy in 0usize..4, dx in 0usize..4) {
        // Embed each pair in a larger canvas at two offsets; background is a
        // confident correct prediction of 0.
        let (hh, ww) = (h + 4, w + 4);
        let place = |oy: usize, ox: usize| {
            let mut zc = vec![-30.0; hh * ww];
            let mut yc = vec![0.0; hh * ww];
            for r in 0..h {
                for c in 0..w {
                    zc[(r + oy) * ww + c + ox] = z[r * w + c];
                    yc[(r + oy) * ww + c + ox] = y[r * w + c];
                }
            }
            combined_loss(&t(1, hh, ww, zc), &t(1, hh, ww, yc)).unwrap().total
        };
        prop_assert!((place(0, 0) - place(dy, dx)).abs() < 1e-9);
    }

    #[test]
    fn moving_toward_wrong_class_never_helps((h, w, z, y) in logits_and_target(6), k in any::<prop::sample::Index>(), step in 0.01f64..4.0) {
        let i = k.index(z.len());
        let mut z2 = z.clone();
        z2[i] += if y[i] > 0.5 { -step } else { step };
        let a = combined_loss(&t(1, h, w, z), &t(1, h, w, y.clone())).unwrap().total;
        let b = combined_loss(&t(1, h, w, z2), &t(1, h, w, y)).unwrap().total;
        prop_assert!(b >= a - 1e-12);
    }
}
