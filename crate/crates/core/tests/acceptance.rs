//! Acceptance gate. Runs every primary criterion at its stated tolerance,
//! prints one PASS/FAIL line each and exits non-zero if any fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pvtformer::analysis::{closed_form_params, complexity, count_params};
use pvtformer::checkpoint::Checkpoint;
use pvtformer::data::{
    phantom_patient_id, split_by_patient, synth_dataset, synth_phantom, volume_to_slices,
    PhantomSpec, SliceOptions, SliceRecord,
};
use pvtformer::gradcheck::{run_suite, GradCheckOptions, BLOCKS};
use pvtformer::losses::{bce_loss, combined_loss, soft_dice_loss};
use pvtformer::metrics::{confusion, hausdorff, overlap_metrics, IouMode, Mask};
use pvtformer::model::{PvtFormer, PvtFormerConfig};
use pvtformer::trainer::{evaluate_records, fit, TrainConfig, Trainer};
use pvtformer::{Shape4, Tensor4};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn parameter_count() -> Outcome {
    let cfg = PvtFormerConfig::default_b3();
    let closed = closed_form_params(&cfg).map_err(|e| e.to_string())?;
    let model = PvtFormer::<f32>::new(&cfg, 0).map_err(|e| e.to_string())?;
    let runtime = count_params(&model) as u64;
    let rel = closed as f64 / 45.51e6 - 1.0;
    check(runtime == closed, format!("runtime {runtime} != closed form {closed}"))?;
    check(rel.abs() <= 0.02, format!("{closed} is {:+.2}% from 45.51 M", 100.0 * rel))?;
    Ok(format!("{:.3} M ({:+.2}% vs 45.51 M), runtime == closed form", closed as f64 / 1e6, 100.0 * rel))
}

fn mac_count() -> Outcome {
    let r = complexity(&PvtFormerConfig::default_b3(), Shape4::new(1, 3, 256, 256)).map_err(|e| e.to_string())?;
    let g = r.macs as f64 / 1e9;
    let rel = g / 43.22 - 1.0;
    check(rel.abs() <= 0.15, format!("{g:.3} GMac is {:+.2}% from 43.22", 100.0 * rel))?;
    Ok(format!("{g:.3} GMac ({:+.2}% vs 43.22, tolerance 15%)", 100.0 * rel))
}

fn shape_contract() -> Outcome {
    let model = PvtFormer::<f32>::new(&PvtFormerConfig::default_b3(), 0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [1, 2, 4] {
        let s = Shape4::new(n, 3, 256, 256);
        let x = Tensor4::from_vec(s, (0..s.numel()).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let y = model.forward(&x).map_err(|e| e.to_string())?;
        check(y.shape() == Shape4::new(n, 1, 256, 256), format!("n={n}: output {:?}", y.shape()))?;
        check(
            y.data().iter().all(|&p| p > 0.0 && p < 1.0),
            format!("n={n}: value outside (0, 1)"),
        )?;
    }
    let x = Tensor4::from_vec(Shape4::new(1, 3, 256, 256), vec![0.5f32; 3 * 65536]).unwrap();
    let f = model.encoder.forward(&x).map_err(|e| e.to_string())?;
    let want = [
        Shape4::new(1, 64, 64, 64),
        Shape4::new(1, 128, 32, 32),
        Shape4::new(1, 320, 16, 16),
    ];
    check(f.shapes()[..3] == want, format!("pyramid {:?}", f.shapes()))?;
    Ok("n in {1,2,4} -> (n,1,256,256) in (0,1); pyramid 64@64x64, 128@32x32, 320@16x16".into())
}

fn gradient_suite() -> Outcome {
    let reports = run_suite(&GradCheckOptions::default()).map_err(|e| e.to_string())?;
    check(reports.len() == BLOCKS.len(), "suite skipped blocks")?;
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .unwrap();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed || r.max_rel_err >= 1e-3 || r.coords < 20)
        .map(|r| r.block.as_str())
        .collect();
    check(failed.is_empty(), format!("failed: {failed:?}"))?;
    let min_coords = reports.iter().map(|r| r.coords).min().unwrap();
    Ok(format!(
        "{} blocks, >= {min_coords} coords each, max rel err {:.2e} ({})",
        reports.len(),
        worst.max_rel_err,
        worst.block
    ))
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cases = 1000;
    let mut with_hd = 0;
    for case in 0..cases {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let (da, db) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let a = Mask::from_fn(h, w, |_, _| rng.gen_bool(da));
        let b = Mask::from_fn(h, w, |_, _| rng.gen_bool(db));
        let (tp, fp, fn_, tn) = common::brute_counts(&a, &b);
        let c = confusion(&a, &b).map_err(|e| e.to_string())?;
        check((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), format!("case {case}: counts"))?;

        let m = overlap_metrics(&c);
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        let empty = tp + fp + fn_ == 0.0;
        let ratio = |n: f64, d: f64| if d == 0.0 { if empty { 1.0 } else { 0.0 } } else { n / d };
        let (r, p) = (ratio(tp, tp + fn_), ratio(tp, tp + fp));
        let f2 = if empty { 1.0 } else { ratio(5.0 * p * r, 4.0 * p + r) };
        let expect = [ratio(2.0 * tp, 2.0 * tp + fp + fn_), ratio(tp, tp + fp + fn_), r, p, f2];
        let got = [m.dice, m.iou, m.recall, m.precision, m.f2];
        check(got == expect, format!("case {case}: {got:?} vs {expect:?}"))?;
        check(
            (m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12,
            format!("case {case}: dice/iou identity"),
        )?;

        let fast = hausdorff(&a, &b).map_err(|e| e.to_string())?;
        let slow = common::brute_hausdorff(&a, &b);
        check(fast == slow, format!("case {case}: hausdorff {fast:?} vs {slow:?}"))?;
        with_hd += fast.is_some() as usize;
    }
    Ok(format!("{cases} pairs up to 32x32 exact ({with_hd} with defined HD)"))
}

fn loss_checks() -> Outcome {
    let t = |h, w, v: Vec<f64>| Tensor4::from_vec(Shape4::new(1, 1, h, w), v).unwrap();
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let masks = [vec![0.0; 16], vec![1.0; 16], (0..16).map(|_| rng.gen_bool(0.4) as u8 as f64).collect()];
    for y in masks {
        let z = y.iter().map(|&v| if v > 0.5 { 20.0 } else { -20.0 }).collect();
        let l = combined_loss(&t(4, 4, z), &t(4, 4, y)).map_err(|e| e.to_string())?;
        check(l.total < 1e-6, format!("perfect prediction loss {}", l.total))?;
        worst = worst.max(l.total);
    }
    let dice = soft_dice_loss(&t(2, 2, vec![0.5; 4]), &t(2, 2, vec![1.0; 4]), 1.0).map_err(|e| e.to_string())?;
    check((dice - 2.0 / 7.0).abs() < 1e-6, format!("soft dice {dice} != 2/7"))?;
    let bce = bce_loss(&t(1, 1, vec![0.0]), &t(1, 1, vec![1.0])).map_err(|e| e.to_string())?;
    check((bce - std::f64::consts::LN_2).abs() < 1e-6, format!("bce {bce} != ln 2"))?;
    Ok(format!("perfect <= {worst:.1e}, dice 2/7 err {:.1e}, bce ln2 err {:.1e}", (dice - 2.0 / 7.0).abs(), (bce - std::f64::consts::LN_2).abs()))
}

fn phantom_records(seed: u64, patients: usize, slices: usize, size: usize) -> Vec<SliceRecord> {
    let opts = SliceOptions {
        size,
        ..Default::default()
    };
    synth_phantom(&PhantomSpec::new(seed, patients, slices, size))
        .unwrap()
        .iter()
        .flat_map(|v| volume_to_slices(v, &opts).unwrap())
        .collect()
}

fn overfit() -> Outcome {
    let records = phantom_records(42, 8, 1, 64);
    let cfg = TrainConfig {
        batch_size: 8,
        max_epochs: 300,
        patience: 300,
        tiny_mode: true,
        ..Default::default()
    };
    let mut trainer = Trainer::new(&PvtFormerConfig::tiny(), &cfg).map_err(|e| e.to_string())?;
    let batch: Vec<&SliceRecord> = records.iter().collect();
    let mut trace = Vec::new();
    let mut dice = 0.0;
    for step in 1..=300 {
        trainer.train_step(&batch).map_err(|e| e.to_string())?;
        if step % 100 == 0 {
            let r = evaluate_records(&trainer.model, &records, 0.5, IouMode::Foreground).map_err(|e| e.to_string())?;
            dice = r.mean.dice.unwrap_or(0.0);
            trace.push(format!("{step}:{dice:.3}"));
        }
    }
    check(dice > 0.95, format!("training Dice {dice:.4} after 300 steps ({})", trace.join(" ")))?;
    Ok(format!("training Dice {dice:.4} after 300 Adam steps at lr 1e-4 ({})", trace.join(" ")))
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = PhantomSpec::new(17, 6, 3, 64);
    let opts = SliceOptions {
        size: 64,
        ..Default::default()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        synth_dataset(d, &spec, [4, 1, 1], &opts).map_err(|e| e.to_string())?;
    }
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    check(fa == fb, "synth datasets differ")?;

    let records = phantom_records(17, 4, 2, 64);
    let (train, val) = records.split_at(6);
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        patience: 2,
        tiny_mode: true,
        ..Default::default()
    };
    let run = || fit(&PvtFormerConfig::tiny(), &cfg, train, val, &mut |_| {});
    let (r1, r2) = (run().map_err(|e| e.to_string())?, run().map_err(|e| e.to_string())?);
    let bits = |o: &pvtformer::trainer::TrainOutcome| {
        o.history.iter().map(|r| (r.epoch, r.train_loss.to_bits(), r.val_loss.to_bits())).collect::<Vec<_>>()
    };
    check(r1.history.len() == 2 && bits(&r1) == bits(&r2), "2-epoch histories differ")?;

    let path = tmp.path().join("best.ckpt");
    r1.best.save(&path).map_err(|e| e.to_string())?;
    let restored = Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(|e| e.to_string())?;
    let original = r1.best.to_model().map_err(|e| e.to_string())?;
    let x = Tensor4::from_vec(
        Shape4::new(2, 3, 64, 64),
        (0..2 * 3 * 4096).map(|i| ((i * 29) % 113) as f32 / 112.0).collect(),
    )
    .unwrap();
    let out = |m: &PvtFormer<f32>| m.forward(&x).map(|y| y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    check(
        out(&original).map_err(|e| e.to_string())? == out(&restored).map_err(|e| e.to_string())?,
        "forward outputs differ after checkpoint round trip",
    )?;
    Ok(format!(
        "synth {} files identical; history {:?} identical; round-trip forward bit-identical",
        fa.len(),
        r1.history.iter().map(|r| format!("{:.5}", r.val_loss)).collect::<Vec<_>>()
    ))
}

fn split_integrity() -> Outcome {
    let ids: Vec<String> = (0..130).map(phantom_patient_id).collect();
    let s = split_by_patient(&ids, [70, 30, 30], 0).map_err(|e| e.to_string())?;
    let sets: Vec<BTreeSet<&String>> = [&s.train, &s.val, &s.test].iter().map(|v| v.iter().collect()).collect();
    check(
        [sets[0].len(), sets[1].len(), sets[2].len()] == [70, 30, 30],
        format!("sizes {} / {} / {}", sets[0].len(), sets[1].len(), sets[2].len()),
    )?;
    check(
        sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]),
        "splits overlap",
    )?;
    Ok("130 patients -> 70 / 30 / 30, pairwise disjoint".into())
}

fn main() {
    let criteria = [
        Criterion { name: "parameter count", budget: Duration::from_secs(10), run: parameter_count },
        Criterion { name: "MAC count", budget: Duration::from_secs(10), run: mac_count },
        Criterion { name: "shape contract", budget: Duration::from_secs(120), run: shape_contract },
        Criterion { name: "gradient suite", budget: Duration::from_secs(300), run: gradient_suite },
        Criterion { name: "metric oracles", budget: Duration::from_secs(60), run: metric_oracles },
        Criterion { name: "loss checks", budget: Duration::from_secs(60), run: loss_checks },
        Criterion { name: "overfit smoke test", budget: Duration::from_secs(600), run: overfit },
        Criterion { name: "determinism", budget: Duration::from_secs(300), run: determinism },
        Criterion { name: "split integrity", budget: Duration::from_secs(10), run: split_integrity },
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failures = 0;
    for c in &criteria {
        if filter.as_deref().is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let result = match result {
            Ok(d) if took > c.budget => Err(format!("{d}; took {took:.1?}, budget {:?}", c.budget)),
            r => r,
        };
        match result {
            Ok(detail) => println!("PASS  {:<20} {detail} [{took:.1?}]", c.name),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {:<20} {detail} [{took:.1?}]", c.name);
            }
        }
    }
    println!("acceptance: {} criteria, {failures} failed", criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
