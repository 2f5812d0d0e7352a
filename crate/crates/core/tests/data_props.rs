use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;
use pvtformer::data::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(phantom_patient_id).collect()
}

fn components(mask: &[u8], size: usize) -> usize {
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if mask[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / size, i % size);
            let mut push = |j: usize| {
                if mask[j] == 1 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                push(i - size);
            }
            if y + 1 < size {
                push(i + size);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < size {
                push(i + 1);
            }
        }
    }
    count
}

#[test]
fn reference_split_sizes() {
    let s = split_by_patient(&ids(130), [70, 30, 30], 7).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 30, 30));
    let all: BTreeSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
    assert_eq!(all.len(), 130);
}

#[test]
fn small_split_is_deterministic_and_checked() {
    let a = split_by_patient(&ids(10), [6, 2, 2], 3).unwrap();
    assert_eq!(a, split_by_patient(&ids(10), [6, 2, 2], 3).unwrap());
    assert_ne!(a, split_by_patient(&ids(10), [6, 2, 2], 4).unwrap());
    assert!(split_by_patient(&ids(10), [8, 2, 2], 3).is_err());
    let mut dup = ids(4);
    dup.push(dup[0].clone());
    assert!(split_by_patient(&dup, [1, 1, 1], 0).is_err());
}

proptest! {
    #[test]
    fn splits_are_disjoint(n in 3usize..60, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let train = ((n as f64) * a * 0.8) as usize;
        let val = (((n - train) as f64) * b) as usize;
        let test = n - train - val;
        let s = split_by_patient(&ids(n), [train, val, test], seed).unwrap();
        let sets: Vec<BTreeSet<&String>> = [&s.train, &s.val, &s.test].iter().map(|v| v.iter().collect()).collect();
        prop_assert!(sets[0].is_disjoint(&sets[1]));
        prop_assert!(sets[0].is_disjoint(&sets[2]));
        prop_assert!(sets[1].is_disjoint(&sets[2]));
        prop_assert_eq!(sets.iter().map(BTreeSet::len).sum::<usize>(), n);
    }

    #[test]
    fn normalisation_idempotent(v in proptest::collection::vec(0.0f32..=1.0, 1..64)) {
        let once = window_normalize(&v, 0.0, 1.0).unwrap();
        prop_assert_eq!(&once, &v);
        prop_assert_eq!(window_normalize(&once, 0.0, 1.0).unwrap(), once);
    }

    #[test]
    fn window_is_clamped_affine(hu in proptest::collection::vec(any::<i16>(), 1..64)) {
        let out = window_normalize(&hu, -200.0, 250.0).unwrap();
        for (&h, &o) in hu.iter().zip(&out) {
            let want = ((h as f64).clamp(-200.0, 250.0) + 200.0) / 450.0;
            prop_assert!((o as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn volume_slicing_contract() {
    let (z, s) = (3, 512);
    let mut labels = vec![0u8; z * s * s];
    // Slice 1: centred 256x256 square, with a tumour pixel inside.
    for y in 128..384 {
        for x in 128..384 {
            labels[s * s + y * s + x] = 1;
        }
    }
    labels[s * s + 300 * s + 300] = 2;
    let vol = Volume {
        header: VolumeHeader {
            patient_id: "p".into(),
            dims: [z, s, s],
            spacing: [1.0, 0.7, 0.7],
        },
        hu: vec![25; z * s * s],
        labels,
    };
    let recs = volume_to_slices(&vol, &SliceOptions::default()).unwrap();
    assert_eq!(recs.len(), z);
    assert!(recs.iter().all(|r| r.size == 256 && r.image.len() == 256 * 256));
    assert!(recs[0].mask.iter().all(|&m| m == 0));
    assert!(recs[1].image.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    for y in 0..256 {
        for x in 0..256 {
            let inside = (64..192).contains(&y) && (64..192).contains(&x);
            assert_eq!(recs[1].mask[y * 256 + x], inside as u8, "pixel {y},{x}");
        }
    }

    let mut bad = vol.clone();
    bad.labels.pop();
    assert!(volume_to_slices(&bad, &SliceOptions::default()).is_err());
}

#[test]
fn phantoms_are_deterministic_connected_and_vary() {
    let spec = PhantomSpec::new(5, 6, 10, 64);
    let a = synth_phantom(&spec).unwrap();
    assert_eq!(a, synth_phantom(&spec).unwrap());
    assert_ne!(a, synth_phantom(&PhantomSpec::new(6, 6, 10, 64)).unwrap());
    let opts = SliceOptions {
        size: 64,
        ..Default::default()
    };
    for v in &a {
        let recs = volume_to_slices(v, &opts).unwrap();
        let areas: Vec<usize> = recs.iter().map(|r| r.mask.iter().filter(|&&m| m == 1).count()).collect();
        for r in &recs {
            assert_eq!(components(&r.mask, 64), 1, "slice {}", r.id());
        }
        let (lo, hi) = (*areas.iter().min().unwrap(), *areas.iter().max().unwrap());
        assert!(lo > 0 && hi as f64 / lo as f64 > 1.2, "areas {areas:?}");

        // Liver interior (label 1) sits around 60 HU.
        let liver: Vec<f64> = v
            .hu
            .iter()
            .zip(&v.labels)
            .filter(|(_, &l)| l == 1)
            .map(|(&h, _)| h as f64)
            .collect();
        let mean = liver.iter().sum::<f64>() / liver.len() as f64;
        assert!((50.0..=70.0).contains(&mean), "liver mean {mean}");
    }
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::new(9, 5, 3, 32);
    let opts = SliceOptions {
        size: 32,
        ..Default::default()
    };
    let m = synth_dataset(dir.path(), &spec, [3, 1, 1], &opts).unwrap();
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), m);

    let mut expected = Vec::new();
    for v in synth_phantom(&spec).unwrap() {
        expected.extend(volume_to_slices(&v, &opts).unwrap());
    }
    let mut loaded = Vec::new();
    for s in SPLITS {
        loaded.extend(load_split(dir.path(), &m, s).unwrap());
    }
    assert_eq!(loaded.len(), expected.len());
    for r in &loaded {
        let e = expected.iter().find(|e| e.id() == r.id()).unwrap();
        assert_eq!(
            r.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            e.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(r.mask, e.mask);
    }

    // A second run with the same seed writes identical bytes.
    let dir2 = tempfile::tempdir().unwrap();
    synth_dataset(dir2.path(), &spec, [3, 1, 1], &opts).unwrap();
    for rec in m.splits.values().flatten() {
        for f in [&rec.image, &rec.mask] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(dir2.path().join(f)).unwrap()
            );
        }
    }
}

#[test]
fn overlapping_manifest_rejected_and_truncated_blob_reported() {
    let dir = tempfile::tempdir().unwrap();
    let opts = SliceOptions {
        size: 16,
        ..Default::default()
    };
    let mut m = synth_dataset(dir.path(), &PhantomSpec::new(1, 3, 1, 16), [1, 1, 1], &opts).unwrap();
    let leaked = m.splits["train"][0].clone();
    m.splits.get_mut("test").unwrap().push(leaked.clone());
    assert!(m.validate().is_err());

    std::fs::write(dir.path().join(&leaked.mask), [0u8; 3]).unwrap();
    let good = DatasetManifest::load(dir.path()).unwrap();
    assert!(matches!(
        load_split(dir.path(), &good, "train"),
        Err(pvtformer::Error::Format { .. })
    ));
}

#[test]
fn batches_replicate_grayscale() {
    let rec = SliceRecord {
        patient_id: "p".into(),
        slice_index: 0,
        size: 4,
        image: (0..16).map(|i| i as f32 / 15.0).collect(),
        mask: (0..16).map(|i| (i % 2) as u8).collect(),
    };
    let (x, y) = batch_tensors(&[&rec, &rec], 3, 4).unwrap();
    assert_eq!(x.shape(), pvtformer::Shape4::new(2, 3, 4, 4));
    for n in 0..2 {
        for c in 0..3 {
            let off = (n * 3 + c) * 16;
            assert_eq!(&x.data()[off..off + 16], &rec.image[..]);
        }
    }
    assert_eq!(y.data()[..16], rec.mask.iter().map(|&m| m as f32).collect::<Vec<_>>()[..]);
}
