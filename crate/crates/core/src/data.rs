//! CT preprocessing, the on-disk slice dataset, patient-level splits and
//! synthetic phantoms.
//!
//! Dataset layout under a root directory:
//!
//! ```text
//! dataset.json                 manifest (all paths relative to the root)
//! slices/<patient>_<k>.img     f32 little-endian, row-major, size*size
//! slices/<patient>_<k>.mask    u8 {0,1}, row-major, size*size
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::bilinear_resize;
use crate::error::{ensure, invalid, Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const MANIFEST_FILE: &str = "dataset.json";
pub const FORMAT_VERSION: u32 = 1;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// HU window mapped onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Window {
    fn default() -> Self {
        Self {
            lo: -200.0,
            hi: 250.0,
        }
    }
}

/// Clamp to `[lo, hi]`, then rescale to `[0, 1]`.
pub fn window_normalize<V: Copy + Into<f64>>(plane: &[V], lo: f64, hi: f64) -> Result<Vec<f32>> {
    ensure!(lo < hi, "window lower bound {lo} must be below upper bound {hi}");
    let span = hi - lo;
    Ok(plane
        .iter()
        .map(|&v| ((v.into().clamp(lo, hi) - lo) / span) as f32)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub patient_id: String,
    /// `(z, y, x)`.
    pub dims: [usize; 3],
    /// Voxel spacing in millimetres, `(z, y, x)`.
    pub spacing: [f64; 3],
}

impl VolumeHeader {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.dims.iter().all(|&d| d > 0),
            "volume dims must be positive: {:?}",
            self.dims
        );
        ensure!(
            self.spacing.iter().all(|&s| s > 0.0 && s.is_finite()),
            "voxel spacing must be positive: {:?}",
            self.spacing
        );
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// CT volume in Hounsfield units with its label map
/// (0 background, 1 liver, 2 tumour).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub header: VolumeHeader,
    pub hu: Vec<i16>,
    pub labels: Vec<u8>,
}

impl Volume {
    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        let n = self.header.voxels();
        ensure!(
            self.hu.len() == n && self.labels.len() == n,
            "volume {}: {} voxels and {} labels but dims {:?}",
            self.header.patient_id,
            self.hu.len(),
            self.labels.len(),
            self.header.dims
        );
        ensure!(
            self.labels.iter().all(|&l| l <= 2),
            "labels must be 0, 1 or 2"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub slice_index: usize,
    pub size: usize,
    /// `size*size` intensities in `[0, 1]`.
    pub image: Vec<f32>,
    /// `size*size` values in `{0, 1}`.
    pub mask: Vec<u8>,
}

impl SliceRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.size * self.size;
        ensure!(
            self.image.len() == n && self.mask.len() == n,
            "slice {}:{} does not match size {}",
            self.patient_id,
            self.slice_index,
            self.size
        );
        ensure!(
            self.image.iter().all(|v| (0.0..=1.0).contains(v)),
            "slice {}:{} image outside [0, 1]",
            self.patient_id,
            self.slice_index
        );
        ensure!(
            self.mask.iter().all(|&m| m <= 1),
            "slice {}:{} mask is not binary",
            self.patient_id,
            self.slice_index
        );
        Ok(())
    }

    pub fn id(&self) -> String {
        format!("{}:{}", self.patient_id, self.slice_index)
    }
}

/// Nearest-neighbour resize of a `h x w` plane; source index is
/// `floor((d + 0.5) * in / out)`.
pub fn nearest_resize<V: Copy>(
    plane: &[V],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<V> {
    let map = |d: usize, inp: usize, out: usize| ((2 * d + 1) * inp / (2 * out)).min(inp - 1);
    let rows: Vec<usize> = (0..out_h).map(|d| map(d, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|d| map(d, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &r in &rows {
        for &c in &cols {
            out.push(plane[r * w + c]);
        }
    }
    out
}

fn bilinear_plane(plane: Vec<f32>, h: usize, w: usize, oh: usize, ow: usize) -> Result<Vec<f32>> {
    if (h, w) == (oh, ow) {
        return Ok(plane);
    }
    let t = Tensor4::from_vec(Shape4::new(1, 1, h, w), plane)?;
    Ok(bilinear_resize(&t, oh, ow)?
        .into_vec()
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect())
}

/// Options for turning a labelled volume into training slices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceOptions {
    pub size: usize,
    pub window: Window,
    /// Use `label == 1` instead of `label >= 1` as foreground.
    pub exclude_tumor: bool,
}

impl Default for SliceOptions {
    fn default() -> Self {
        Self {
            size: 256,
            window: Window::default(),
            exclude_tumor: false,
        }
    }
}

/// One record per axial plane: windowed, bilinearly resized image and
/// nearest-neighbour resized liver mask.
pub fn volume_to_slices(volume: &Volume, opts: &SliceOptions) -> Result<Vec<SliceRecord>> {
    volume.validate()?;
    ensure!(opts.size > 0, "target slice size must be positive");
    let [z, h, w] = volume.header.dims;
    let plane = h * w;
    (0..z)
        .map(|k| {
            let range = k * plane..(k + 1) * plane;
            let img = window_normalize(&volume.hu[range.clone()], opts.window.lo, opts.window.hi)?;
            let image = bilinear_plane(img, h, w, opts.size, opts.size)?;
            let fg: Vec<u8> = volume.labels[range]
                .iter()
                .map(|&l| u8::from(if opts.exclude_tumor { l == 1 } else { l >= 1 }))
                .collect();
            let mask = nearest_resize(&fg, h, w, opts.size, opts.size);
            Ok(SliceRecord {
                patient_id: volume.header.patient_id.clone(),
                slice_index: k,
                size: opts.size,
                image,
                mask,
            })
        })
        .collect()
}

/// Patient ids assigned to the three splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientSplit {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl PatientSplit {
    pub fn get(&self, name: &str) -> Option<&[String]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn split_of(&self, patient: &str) -> Option<&'static str> {
        SPLITS
            .into_iter()
            .find(|s| self.get(s).is_some_and(|ids| ids.iter().any(|p| p == patient)))
    }
}

/// Seeded patient-level shuffle into `(train, val, test)` of the given sizes.
/// Ids are sorted first, so the result depends only on the set of ids.
pub fn split_by_patient(ids: &[String], counts: [usize; 3], seed: u64) -> Result<PatientSplit> {
    let mut unique: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    ensure!(unique.len() == ids.len(), "patient ids must be unique");
    let need: usize = counts.iter().sum();
    ensure!(
        need <= unique.len(),
        "split needs {need} patients ({counts:?}) but only {} are available",
        unique.len()
    );
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = unique.into_iter();
    let mut take = |n| it.by_ref().take(n).collect::<Vec<_>>();
    Ok(PatientSplit {
        seed,
        train: take(counts[0]),
        val: take(counts[1]),
        test: take(counts[2]),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub patient_id: String,
    pub slice_index: usize,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub size: usize,
    pub window: Window,
    pub exclude_tumor: bool,
    pub splits: BTreeMap<String, Vec<ManifestRecord>>,
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        self.validate()?;
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format {
                what: "dataset manifest",
                detail: format!("version {} (expected {FORMAT_VERSION})", self.version),
            });
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, recs) in &self.splits {
            for r in recs {
                if let Some(prev) = owner.insert(&r.patient_id, split) {
                    if prev != split {
                        return Err(Error::Format {
                            what: "dataset manifest",
                            detail: format!(
                                "patient {} appears in both `{prev}` and `{split}`",
                                r.patient_id
                            ),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[ManifestRecord]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid!("dataset has no split `{name}`"))
    }

    pub fn patients(&self, name: &str) -> Result<Vec<String>> {
        let ids: BTreeSet<String> = self.split(name)?.iter().map(|r| r.patient_id.clone()).collect();
        Ok(ids.into_iter().collect())
    }
}

pub fn write_slice(root: &Path, rec: &SliceRecord) -> Result<ManifestRecord> {
    rec.validate()?;
    let dir = root.join("slices");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = format!("{}_{:04}", rec.patient_id, rec.slice_index);
    let image = PathBuf::from("slices").join(format!("{stem}.img"));
    let mask = PathBuf::from("slices").join(format!("{stem}.mask"));
    let bytes: Vec<u8> = rec.image.iter().flat_map(|v| v.to_le_bytes()).collect();
    let ip = root.join(&image);
    fs::write(&ip, bytes).map_err(|e| Error::io(&ip, e))?;
    let mp = root.join(&mask);
    fs::write(&mp, &rec.mask).map_err(|e| Error::io(&mp, e))?;
    Ok(ManifestRecord {
        patient_id: rec.patient_id.clone(),
        slice_index: rec.slice_index,
        image,
        mask,
    })
}

pub fn read_slice(root: &Path, size: usize, rec: &ManifestRecord) -> Result<SliceRecord> {
    let n = size * size;
    let ip = root.join(&rec.image);
    let bytes = fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
    if bytes.len() != 4 * n {
        return Err(Error::Format {
            what: "slice image",
            detail: format!("{} has {} bytes, expected {}", ip.display(), bytes.len(), 4 * n),
        });
    }
    let image = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mp = root.join(&rec.mask);
    let mask = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    if mask.len() != n {
        return Err(Error::Format {
            what: "slice mask",
            detail: format!("{} has {} bytes, expected {n}", mp.display(), mask.len()),
        });
    }
    let out = SliceRecord {
        patient_id: rec.patient_id.clone(),
        slice_index: rec.slice_index,
        size,
        image,
        mask,
    };
    out.validate().map_err(|e| Error::Format {
        what: "slice",
        detail: e.to_string(),
    })?;
    Ok(out)
}

/// Loads every record of a split in manifest order.
pub fn load_split(root: &Path, manifest: &DatasetManifest, name: &str) -> Result<Vec<SliceRecord>> {
    manifest
        .split(name)?
        .iter()
        .map(|r| read_slice(root, manifest.size, r))
        .collect()
}

/// Writes `records` under `root`, grouped into splits by patient, and saves
/// the manifest. Patients not named by `split` are left out.
pub fn write_dataset(
    root: &Path,
    records: &[SliceRecord],
    split: &PatientSplit,
    opts: &SliceOptions,
) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut splits: BTreeMap<String, Vec<ManifestRecord>> =
        SPLITS.iter().map(|s| (s.to_string(), Vec::new())).collect();
    for rec in records {
        ensure!(
            rec.size == opts.size,
            "slice {} has size {} but dataset size is {}",
            rec.id(),
            rec.size,
            opts.size
        );
        if let Some(name) = split.split_of(&rec.patient_id) {
            let entry = write_slice(root, rec)?;
            splits.get_mut(name).expect("known split").push(entry);
        }
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        seed: split.seed,
        size: opts.size,
        window: opts.window,
        exclude_tumor: opts.exclude_tumor,
        splits,
    };
    manifest.save(root)?;
    Ok(manifest)
}

/// Parameters of the synthetic phantom generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_patients: usize,
    pub slices_per_patient: usize,
    pub size: usize,
    /// Probability that a patient carries a tumour (label 2) inside the liver.
    pub tumor_prob: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, n_patients: usize, slices_per_patient: usize, size: usize) -> Self {
        Self {
            seed,
            n_patients,
            slices_per_patient,
            size,
            tumor_prob: 0.5,
        }
    }
}

pub fn phantom_patient_id(i: usize) -> String {
    format!("phantom{i:04}")
}

/// Per-patient volumes: a smooth soft-tissue texture around a randomly
/// oriented ellipsoidal liver of about 60 HU. The slab covers the central
/// 75% of the ellipsoid's z extent, so cross-sections shrink towards both
/// ends while never vanishing.
pub fn synth_phantom(spec: &PhantomSpec) -> Result<Vec<Volume>> {
    ensure!(
        spec.n_patients > 0 && spec.slices_per_patient > 0 && spec.size >= 8,
        "phantom needs positive patient and slice counts and size >= 8"
    );
    ensure!(
        (0.0..=1.0).contains(&spec.tumor_prob),
        "tumor_prob must lie in [0, 1]"
    );
    Ok((0..spec.n_patients).map(|p| phantom_volume(spec, p)).collect())
}

fn phantom_volume(spec: &PhantomSpec, patient: usize) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(patient as u64 + 1);
    let (s, z) = (spec.size, spec.slices_per_patient);
    let sf = s as f64;

    // Background: base tissue plus a few low-frequency waves.
    let base = rng.gen_range(-50.0..-20.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(5.0..12.0),
                rng.gen_range(0.5..3.0) * std::f64::consts::TAU / sf,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::PI),
            )
        })
        .collect();

    let liver_hu = rng.gen_range(50.0..70.0);
    let cy = sf * rng.gen_range(0.4..0.6);
    let cx = sf * rng.gen_range(0.4..0.6);
    let ry = sf * rng.gen_range(0.2..0.32);
    let rx = sf * rng.gen_range(0.2..0.32);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (sin_t, cos_t) = theta.sin_cos();

    let tumor = rng.gen_bool(spec.tumor_prob).then(|| {
        let r = rng.gen_range(0.2..0.35) * ry.min(rx);
        let dy = rng.gen_range(-0.3..0.3) * ry;
        let dx = rng.gen_range(-0.3..0.3) * rx;
        (cy + dy, cx + dx, r, rng.gen_range(20.0..40.0))
    });

    let mut hu = Vec::with_capacity(z * s * s);
    let mut labels = Vec::with_capacity(z * s * s);
    for k in 0..z {
        let zrel = if z == 1 {
            0.0
        } else {
            -0.75 + 1.5 * k as f64 / (z - 1) as f64
        };
        let scale2 = 1.0 - zrel * zrel;
        for y in 0..s {
            for x in 0..s {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut v = base;
                for &(amp, freq, phase, dir) in &waves {
                    let t = fy * dir.sin() + fx * dir.cos();
                    v += amp * (freq * t + phase + 0.3 * k as f64).sin();
                }
                let (dy, dx) = (fy - cy, fx - cx);
                let u = (cos_t * dy + sin_t * dx) / ry;
                let w = (-sin_t * dy + cos_t * dx) / rx;
                let mut label = 0u8;
                if u * u + w * w <= scale2 {
                    label = 1;
                    v = liver_hu;
                    if let Some((ty, tx, r, thu)) = tumor {
                        let d2 = (fy - ty).powi(2) + (fx - tx).powi(2);
                        if d2 <= r * r * scale2 {
                            label = 2;
                            v = thu;
                        }
                    }
                }
                v += rng.gen_range(-8.0..8.0);
                hu.push(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
                labels.push(label);
            }
        }
    }
    Volume {
        header: VolumeHeader {
            patient_id: phantom_patient_id(patient),
            dims: [z, s, s],
            spacing: [2.5, 0.8, 0.8],
        },
        hu,
        labels,
    }
}

/// Generates phantoms, slices them, splits patients and writes the dataset.
pub fn synth_dataset(
    root: &Path,
    spec: &PhantomSpec,
    counts: [usize; 3],
    opts: &SliceOptions,
) -> Result<DatasetManifest> {
    let volumes = synth_phantom(spec)?;
    let ids: Vec<String> = volumes.iter().map(|v| v.header.patient_id.clone()).collect();
    let split = split_by_patient(&ids, counts, spec.seed)?;
    let mut records = Vec::new();
    for v in &volumes {
        records.extend(volume_to_slices(v, opts)?);
    }
    write_dataset(root, &records, &split, opts)
}

/// Stacks records into a model input (grayscale replicated to `channels`)
/// and a binary target, resized to `size x size`.
pub fn batch_tensors(
    records: &[&SliceRecord],
    channels: usize,
    size: usize,
) -> Result<(Tensor4<f32>, Tensor4<f32>)> {
    ensure!(!records.is_empty(), "empty batch");
    ensure!(channels > 0 && size > 0, "batch needs channels and size");
    let plane = size * size;
    let mut x = Vec::with_capacity(records.len() * channels * plane);
    let mut y = Vec::with_capacity(records.len() * plane);
    for r in records {
        r.validate()?;
        let img = bilinear_plane(r.image.clone(), r.size, r.size, size, size)?;
        for _ in 0..channels {
            x.extend_from_slice(&img);
        }
        let m = if r.size == size {
            r.mask.clone()
        } else {
            nearest_resize(&r.mask, r.size, r.size, size, size)
        };
        y.extend(m.into_iter().map(f32::from));
    }
    let n = records.len();
    Ok((
        Tensor4::from_vec(Shape4::new(n, channels, size, size), x)?,
        Tensor4::from_vec(Shape4::new(n, 1, size, size), y)?,
    ))
}
