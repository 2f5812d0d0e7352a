//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use pvtformer::metrics::Mask;
use pvtformer::model::PvtFormerConfig;
use proptest::prelude::*;

/// (tp, fp, fn, tn) by direct pixel recount.
pub fn brute_counts(pred: &Mask, gt: &Mask) -> (u64, u64, u64, u64) {
    let mut c = (0, 0, 0, 0);
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            match (pred.get(y, x), gt.get(y, x)) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => c.3 += 1,
            }
        }
    }
    c
}

fn is_boundary(m: &Mask, y: usize, x: usize) -> bool {
    if !m.get(y, x) {
        return false;
    }
    let (h, w) = (m.height() as isize, m.width() as isize);
    [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
        let (ny, nx) = (y as isize + dy, x as isize + dx);
        ny < 0 || nx < 0 || ny >= h || nx >= w || !m.get(ny as usize, nx as usize)
    })
}

pub fn brute_boundary(m: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if is_boundary(m, y, x) {
                out.push((y, x));
            }
        }
    }
    out
}

/// All-pairs symmetric Hausdorff distance between boundary sets.
pub fn brute_hausdorff(a: &Mask, b: &Mask) -> Option<f64> {
    let (pa, pb) = (brute_boundary(a), brute_boundary(b));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let d2 = |p: (usize, usize), q: (usize, usize)| {
        let dy = p.0 as i64 - q.0 as i64;
        let dx = p.1 as i64 - q.1 as i64;
        dy * dy + dx * dx
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| d2(p, q)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&pa, &pb).max(directed(&pb, &pa)) as f64).sqrt())
}

/// Random mask pair of equal shape, up to `max` per side, with a random
/// fill density so that empty, sparse and dense masks all occur.
pub fn mask_pair(max: usize) -> impl Strategy<Value = (Mask, Mask)> {
    (1..=max, 1..=max, 0u8..=10, 0u8..=10).prop_flat_map(|(h, w, da, db)| {
        let n = h * w;
        (
            proptest::collection::vec(0u8..10, n),
            proptest::collection::vec(0u8..10, n),
        )
            .prop_map(move |(a, b)| {
                let bin = |v: Vec<u8>, d: u8| v.into_iter().map(|x| u8::from(x < d)).collect();
                (
                    Mask::new(h, w, bin(a, da)).unwrap(),
                    Mask::new(h, w, bin(b, db)).unwrap(),
                )
            })
    })
}

/// Parameter and MAC count written out layer by layer from the
/// architecture description, without touching the library's counter.
pub fn reference_complexity(cfg: &PvtFormerConfig, side: usize) -> (u64, u64) {
    let e = &cfg.encoder;
    let (mut p, mut m) = (0usize, 0usize);
    let mut hw = side;
    let mut cin = e.in_channels;
    let mut grids = Vec::new();
    for i in 0..4 {
        let (k, s, pad) = if i == 0 { (7, 4, 3) } else { (3, 2, 1) };
        let d = e.embed_dims[i];
        hw = (hw + 2 * pad - k) / s + 1;
        grids.push(hw);
        let l = hw * hw;
        p += cin * d * k * k + d + 2 * d;
        m += l * d * cin * k * k;
        let hid = d * e.mlp_ratios[i];
        let r = e.sr_ratios[i];
        for _ in 0..e.depths[i] {
            p += 4 * d; // two layer norms
            p += (d * d + d) + (2 * d * d + 2 * d) + (d * d + d); // q, kv, proj
            m += 2 * l * d * d;
            let lk = if r > 1 {
                p += d * d * r * r + d + 2 * d;
                let lk = (hw / r) * (hw / r);
                m += lk * d * d * r * r;
                lk
            } else {
                l
            };
            m += lk * d * 2 * d;
            m += 2 * l * lk * d;
            p += (d * hid + hid) + (9 * hid + hid) + (hid * d + d);
            m += 2 * l * d * hid + 9 * l * hid;
        }
        p += 2 * d;
        cin = d;
    }
    let res = |ci: usize, co: usize, area: usize| {
        let mut p = 9 * ci * co + 9 * co * co + 4 * co;
        let mut m = area * (9 * ci * co + 9 * co * co);
        if ci != co {
            p += ci * co + 2 * co;
            m += area * ci * co;
        }
        (p, m)
    };
    let rc = cfg.reduce_c;
    let full = side * side;
    for i in 0..3 {
        let a = grids[i] * grids[i];
        p += e.embed_dims[i] * rc + 2 * rc;
        m += a * e.embed_dims[i] * rc;
    }
    let mut add = |(dp, dm): (usize, usize)| {
        p += dp;
        m += dm;
    };
    for _ in 0..3 {
        add(res(rc, rc, full));
    }
    add(res(2 * rc, rc, grids[1] * grids[1]));
    add(res(2 * rc, rc, grids[0] * grids[0]));
    add(res(4 * rc, cfg.head_channels, full));
    add((cfg.head_channels + 1, full * cfg.head_channels));
    (p as u64, m as u64)
}
