//! Slice-level segmentation metrics and their aggregation.
//!
//! Conventions:
//! - A ratio whose numerator and denominator are both zero is 1 when the slice
//!   is empty in both prediction and ground truth (`tp = fp = fn = 0`), else 0.
//! - Hausdorff distance is the full (max) symmetric distance between boundary
//!   pixel sets, in pixels. A foreground pixel is on the boundary when at least
//!   one 4-neighbour is background; pixels outside the image are background.
//!   It is undefined when either mask is empty.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// A binary `h x w` mask stored row-major as 0/1 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        ensure!(
            data.len() == h * w,
            "mask data has {} values, expected {h}x{w}",
            data.len()
        );
        ensure!(data.iter().all(|&v| v <= 1), "mask values must be 0 or 1");
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(u8::from(f(y, x)));
            }
        }
        Self { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Foreground pixels with a background (or out-of-image) 4-neighbour.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == self.h
                    || x + 1 == self.w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    ensure!(
        pred.h == gt.h && pred.w == gt.w,
        "mask shape mismatch: {}x{} vs {}x{}",
        pred.h,
        pred.w,
        gt.h,
        gt.w
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn is_empty_vs_empty(&self) -> bool {
        self.tp == 0 && self.fp == 0 && self.fn_ == 0
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    check_pair(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapMetrics {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f2: f64,
}

pub fn overlap_metrics(c: &ConfusionCounts) -> OverlapMetrics {
    let empty = c.is_empty_vs_empty();
    let ratio = |num: f64, den: f64| {
        if den == 0.0 {
            if empty {
                1.0
            } else {
                0.0
            }
        } else {
            num / den
        }
    };
    let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    OverlapMetrics {
        dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
        iou: ratio(tp, tp + fp + fn_),
        recall,
        precision,
        f2: if empty {
            1.0
        } else {
            ratio(5.0 * precision * recall, 4.0 * precision + recall)
        },
    }
}

/// Squared Euclidean distance transform of a point set on an `h x w` grid:
/// exact two-pass lower-envelope algorithm on integer squared distances.
fn squared_edt(h: usize, w: usize, points: &[(usize, usize)]) -> Vec<i64> {
    const INF: i64 = i64::MAX / 4;
    let mut grid = vec![INF; h * w];
    for &(y, x) in points {
        grid[y * w + x] = 0;
    }
    // Columns: nearest feature along y.
    let mut col = vec![INF; h];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if grid[y * w + x] == 0 {
                last = Some(y);
            }
            col[y] = last.map_or(INF, |l| (y - l) as i64);
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if grid[y * w + x] == 0 {
                next = Some(y);
            }
            if let Some(n) = next {
                col[y] = col[y].min((n - y) as i64);
            }
            grid[y * w + x] = if col[y] == INF { INF } else { col[y] * col[y] };
        }
    }
    // Rows: lower envelope of parabolas (x - q)^2 + f(q).
    let mut f = vec![0i64; w];
    let mut v = vec![0usize; w];
    let mut z = vec![0f64; w + 1];
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        f.copy_from_slice(row);
        let mut k: isize = -1;
        for q in 0..w {
            if f[q] == INF {
                continue;
            }
            let mut s = 0.0;
            while k >= 0 {
                let p = v[k as usize];
                s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64
                    / (2.0 * (q as f64 - p as f64));
                if s <= z[k as usize] {
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = if k == 0 { f64::NEG_INFINITY } else { s };
            z[k as usize + 1] = f64::INFINITY;
        }
        if k < 0 {
            continue;
        }
        let mut j = 0usize;
        for x in 0..w {
            while z[j + 1] < x as f64 {
                j += 1;
            }
            let q = v[j];
            let d = x as i64 - q as i64;
            row[x] = d * d + f[q];
        }
    }
    grid
}

fn directed_sq(from: &[(usize, usize)], edt: &[i64], w: usize) -> i64 {
    from.iter().map(|&(y, x)| edt[y * w + x]).max().unwrap_or(0)
}

/// Symmetric boundary Hausdorff distance in pixels; `None` when either mask
/// is empty.
pub fn hausdorff(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    check_pair(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Ok(None);
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let (h, w) = (pred.h, pred.w);
    let to_gt = directed_sq(&bp, &squared_edt(h, w, &bg), w);
    let to_pred = directed_sq(&bg, &squared_edt(h, w, &bp), w);
    Ok(Some((to_gt.max(to_pred) as f64).sqrt()))
}

/// How the per-slice IoU column is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Foreground IoU.
    #[default]
    Foreground,
    /// Mean of foreground and background IoU.
    TwoClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub slice_id: String,
    pub dice: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f2: f64,
    pub hd: Option<f64>,
}

pub fn evaluate_slice(id: &str, pred: &Mask, gt: &Mask, mode: IouMode) -> Result<SliceMetrics> {
    let c = confusion(pred, gt)?;
    let m = overlap_metrics(&c);
    let miou = match mode {
        IouMode::Foreground => m.iou,
        IouMode::TwoClass => {
            let bg = overlap_metrics(&ConfusionCounts {
                tp: c.tn,
                fp: c.fn_,
                fn_: c.fp,
                tn: c.tp,
            });
            0.5 * (m.iou + bg.iou)
        }
    };
    Ok(SliceMetrics {
        slice_id: id.to_string(),
        dice: m.dice,
        miou,
        recall: m.recall,
        precision: m.precision,
        f2: m.f2,
        hd: hausdorff(pred, gt)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub dice: Option<f64>,
    pub miou: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f2: Option<f64>,
    pub hd: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCounts {
    pub dice: usize,
    pub miou: usize,
    pub recall: usize,
    pub precision: usize,
    pub f2: usize,
    pub hd: usize,
}

/// The conventions a report was computed under, recorded alongside it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conventions {
    pub iou_mode: IouMode,
    pub empty_vs_empty: String,
    pub hd: String,
}

impl Conventions {
    pub fn new(iou_mode: IouMode) -> Self {
        Self {
            iou_mode,
            empty_vs_empty: "overlap metrics = 1; hd undefined and skipped".into(),
            hd: "max symmetric boundary distance, pixels, 4-neighbour boundary".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean: MetricMeans,
    pub skipped: SkippedCounts,
    pub conventions: Conventions,
    pub slices: Vec<SliceMetrics>,
}

fn mean_defined(values: impl Iterator<Item = f64>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            skipped += 1;
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}

/// Unweighted mean of every metric over the slices where it is defined.
pub fn aggregate(slices: Vec<SliceMetrics>, mode: IouMode) -> Result<MetricsReport> {
    ensure!(!slices.is_empty(), "cannot aggregate zero slices");
    let col = |f: fn(&SliceMetrics) -> f64| mean_defined(slices.iter().map(f));
    let (dice, sd) = col(|s| s.dice);
    let (miou, si) = col(|s| s.miou);
    let (recall, sr) = col(|s| s.recall);
    let (precision, sp) = col(|s| s.precision);
    let (f2, sf) = col(|s| s.f2);
    let (hd, sh) = col(|s| s.hd.unwrap_or(f64::NAN));
    Ok(MetricsReport {
        mean: MetricMeans {
            dice,
            miou,
            recall,
            precision,
            f2,
            hd,
        },
        skipped: SkippedCounts {
            dice: sd,
            miou: si,
            recall: sr,
            precision: sp,
            f2: sf,
            hd: sh,
        },
        conventions: Conventions::new(mode),
        slices,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-slice table; undefined HD is written as an empty field.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let csv_err = |e: csv::Error| Error::Csv(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slice_id", "dice", "miou", "recall", "precision", "f2", "hd"])
            .map_err(csv_err)?;
        for s in &self.slices {
            w.write_record([
                s.slice_id.clone(),
                s.dice.to_string(),
                s.miou.to_string(),
                s.recall.to_string(),
                s.precision.to_string(),
                s.f2.to_string(),
                s.hd.map(|v| v.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(h: usize, w: usize, py: usize, px: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| y == py && x == px)
    }

    #[test]
    fn confusion_extremes() {
        let ones = Mask::from_fn(4, 4, |_, _| true);
        let zeros = Mask::zeros(4, 4);
        let c = confusion(&ones, &ones).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (16, 0, 0, 0));
        let c = confusion(&ones, &zeros).unwrap();
        assert_eq!(c.fp, 16);
        assert!(confusion(&ones, &Mask::zeros(4, 5)).is_err());
    }

    #[test]
    fn overlap_hand_values() {
        let m = overlap_metrics(&ConfusionCounts {
            tp: 1,
            fp: 1,
            fn_: 1,
            tn: 0,
        });
        assert_eq!(m.dice, 0.5);
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        // P = 0.8, R = 0.5.
        let m = overlap_metrics(&ConfusionCounts {
            tp: 4,
            fp: 1,
            fn_: 4,
            tn: 0,
        });
        assert!((m.f2 - 0.540_540_540_540_540_5).abs() < 1e-12);
        let e = overlap_metrics(&ConfusionCounts::default());
        assert_eq!((e.dice, e.iou, e.recall, e.precision, e.f2), (1.0, 1.0, 1.0, 1.0, 1.0));
        let miss = overlap_metrics(&ConfusionCounts {
            tp: 0,
            fp: 3,
            fn_: 0,
            tn: 1,
        });
        assert_eq!((miss.dice, miss.recall, miss.f2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn hausdorff_examples() {
        let a = Mask::from_fn(8, 8, |y, x| (2..6).contains(&y) && (1..5).contains(&x));
        assert_eq!(hausdorff(&a, &a).unwrap(), Some(0.0));
        let d = hausdorff(&pixel(5, 5, 0, 0), &pixel(5, 5, 3, 4)).unwrap();
        assert_eq!(d, Some(5.0));
        assert_eq!(hausdorff(&a, &Mask::zeros(8, 8)).unwrap(), None);
    }

    #[test]
    fn boundary_treats_border_as_background() {
        let full = Mask::from_fn(3, 3, |_, _| true);
        assert_eq!(full.boundary().len(), 8);
    }

    #[test]
    fn aggregate_conventions() {
        let s = |dice, hd| SliceMetrics {
            slice_id: "s".into(),
            dice,
            miou: dice,
            recall: dice,
            precision: dice,
            f2: dice,
            hd,
        };
        let r = aggregate(vec![s(1.0, Some(2.0)), s(0.0, None), s(0.5, Some(4.0))], IouMode::Foreground)
            .unwrap();
        assert_eq!(r.mean.dice, Some(0.5));
        assert_eq!(r.mean.hd, Some(3.0));
        assert_eq!(r.skipped.hd, 1);
        assert!(aggregate(vec![], IouMode::Foreground).is_err());
    }

    #[test]
    fn two_class_iou_mode() {
        let pred = Mask::from_fn(2, 2, |y, _| y == 0);
        let gt = Mask::from_fn(2, 2, |y, x| y == 0 && x == 0);
        let fg = evaluate_slice("a", &pred, &gt, IouMode::Foreground).unwrap();
        let two = evaluate_slice("a", &pred, &gt, IouMode::TwoClass).unwrap();
        assert_eq!(fg.miou, 0.5);
        assert!((two.miou - 0.5 * (0.5 + 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn csv_layout() {
        let r = aggregate(
            vec![SliceMetrics {
                slice_id: "p0:3".into(),
                dice: 1.0,
                miou: 1.0,
                recall: 1.0,
                precision: 1.0,
                f2: 1.0,
                hd: None,
            }],
            IouMode::Foreground,
        )
        .unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "slice_id,dice,miou,recall,precision,f2,hd\np0:3,1,1,1,1,1,\n"
        );
    }
}
