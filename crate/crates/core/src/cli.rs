//! Command-line interface. [`run`] is the whole program; the binary only
//! forwards process arguments and exits with its status.
//!
//! Exit status: 0 success, 1 usage or invalid argument, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{complexity, count_params};
use crate::checkpoint::Checkpoint;
use crate::data::{
    batch_tensors, nearest_resize, synth_dataset, DatasetManifest, PhantomSpec, SliceOptions,
    SliceRecord, Window,
};
use crate::error::{ensure, Error, Result};
use crate::gradcheck::{run_block, GradCheckOptions, BLOCKS};
use crate::metrics::IouMode;
use crate::model::{predict_mask, PvtFormer, PvtFormerConfig};
use crate::tensor::Shape4;
use crate::trainer::{evaluate, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "pvtformer", version, about = "PVTFormer liver segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset with a patient-level split.
    Synth(SynthArgs),
    /// Train a model on a dataset and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write a metrics report.
    Eval(EvalArgs),
    /// Segment a single slice file.
    Predict(PredictArgs),
    /// Print parameter and MAC counts of a preset.
    Count(CountArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of phantom patients.
    #[arg(long, default_value_t = 130)]
    patients: usize,
    /// Axial slices per patient.
    #[arg(long, default_value_t = 12)]
    slices: usize,
    /// Seed of the phantom generator and the patient split.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Slice side length in pixels.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Patients per split as TRAIN,VAL,TEST; defaults to the 70:30:30 ratio.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<usize>>,
    /// Foreground is liver without tumour (label 1 only).
    #[arg(long)]
    exclude_tumor: bool,
    /// Probability that a phantom carries a tumour.
    #[arg(long, default_value_t = 0.5)]
    tumor_prob: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory containing dataset.json.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config_file: Option<PathBuf>,
    /// Use the tiny preset (64x64 input).
    #[arg(long)]
    tiny: bool,
    /// Maximum epochs (default 500); also caps the patience.
    #[arg(long)]
    epochs: Option<usize>,
    /// Slices per optimizer step (default 16).
    #[arg(long)]
    batch: Option<usize>,
    /// Adam learning rate (default 1e-4).
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for initialisation and batch order (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Early-stopping patience in epochs (default 50).
    #[arg(long)]
    patience: Option<usize>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    /// History CSV path; defaults to the checkpoint path with `.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IouArg {
    Foreground,
    TwoClass,
}

impl From<IouArg> for IouMode {
    fn from(a: IouArg) -> Self {
        match a {
            IouArg::Foreground => IouMode::Foreground,
            IouArg::TwoClass => IouMode::TwoClass,
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory containing dataset.json.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Split name: train, val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Report path; `.json` and `.csv` files are written next to each other.
    #[arg(long)]
    report: PathBuf,
    /// Probability threshold for the foreground.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// IoU averaging: foreground only, or mean of foreground and background.
    #[arg(long, value_enum, default_value_t = IouArg::Foreground)]
    iou_mode: IouArg,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint to run.
    #[arg(long)]
    ckpt: PathBuf,
    /// Slice image blob (f32 little-endian, square).
    #[arg(long = "in")]
    input: PathBuf,
    /// Mask blob to write (u8, same size as the input slice).
    #[arg(long)]
    out: PathBuf,
    /// Probability threshold for the foreground.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Optional 8-bit PGM preview of the mask.
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CountArgs {
    /// Preset name: default or tiny.
    #[arg(long, default_value = "default")]
    config: String,
    /// Square input side length.
    #[arg(long, default_value_t = 256)]
    input: usize,
    /// Batch size of the counted input.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
    /// Also build the model and check the runtime parameter enumeration.
    #[arg(long)]
    verify: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for initialisation, inputs and probed coordinates.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Restrict to one block.
    #[arg(long)]
    block: Option<String>,
    /// Random parameter coordinates per block.
    #[arg(long, default_value_t = 20)]
    coords: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(out, "{text}");
                    if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                        EXIT_USAGE
                    } else {
                        EXIT_OK
                    }
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Count(a) => cmd_count(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn echo(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let _ = writeln!(out, "config: {}", serde_json::to_string(value)?);
    Ok(())
}

/// Patients per split in the 70:30:30 proportion of the reference study.
pub fn default_split_counts(patients: usize) -> [usize; 3] {
    if patients == 130 {
        return [70, 30, 30];
    }
    let val = (patients * 30 + 65) / 130;
    let test = val;
    let train = patients.saturating_sub(val + test);
    [train, val, test]
}

#[derive(Serialize)]
struct SynthEcho<'a> {
    out: &'a Path,
    patients: usize,
    slices: usize,
    seed: u64,
    size: usize,
    split: [usize; 3],
    exclude_tumor: bool,
    tumor_prob: f64,
    window: Window,
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> Result<i32> {
    ensure!(a.patients > 0, "--patients must be positive");
    ensure!(a.slices > 0, "--slices must be positive");
    let split = match &a.split {
        Some(v) => {
            ensure!(v.len() == 3, "--split takes three counts, got {}", v.len());
            [v[0], v[1], v[2]]
        }
        None => default_split_counts(a.patients),
    };
    ensure!(
        split.iter().sum::<usize>() == a.patients,
        "--split {split:?} must add up to --patients {}",
        a.patients
    );
    let opts = SliceOptions {
        size: a.size,
        window: Window::default(),
        exclude_tumor: a.exclude_tumor,
    };
    echo(
        out,
        &SynthEcho {
            out: &a.out,
            patients: a.patients,
            slices: a.slices,
            seed: a.seed,
            size: a.size,
            split,
            exclude_tumor: a.exclude_tumor,
            tumor_prob: a.tumor_prob,
            window: opts.window,
        },
    )?;
    let mut spec = PhantomSpec::new(a.seed, a.patients, a.slices, a.size);
    spec.tumor_prob = a.tumor_prob;
    let m = synth_dataset(&a.out, &spec, split, &opts)?;
    let total: usize = m.splits.values().map(Vec::len).sum();
    let _ = writeln!(out, "wrote {total} slice records to {}", a.out.display());
    for (name, recs) in &m.splits {
        let _ = writeln!(
            out,
            "  {name:<5} {:>4} patients {:>6} slices",
            m.patients(name)?.len(),
            recs.len()
        );
    }
    Ok(EXIT_OK)
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config_file {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        None => TrainConfig::default(),
    };
    if a.tiny {
        cfg.tiny_mode = true;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
        cfg.patience = cfg.patience.min(v.max(1));
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.adam.lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    ensure!(cfg.max_epochs > 0, "--epochs must be positive");
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = resolve_train_config(&a)?;
    echo(out, &cfg)?;
    let model_cfg = cfg.model_config();
    let manifest = DatasetManifest::load(&a.data)?;
    let history_path = a
        .history
        .clone()
        .unwrap_or_else(|| a.out.with_extension("history.csv"));
    let outcome = train(&model_cfg, &cfg, &a.data, &manifest, &mut |r| {
        let _ = writeln!(
            out,
            "epoch {:>4}  train {:.6}  val {:.6}",
            r.epoch, r.train_loss, r.val_loss
        );
    })?;
    outcome.best.save(&a.out)?;
    let f = fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    outcome.write_history_csv(std::io::BufWriter::new(f))?;
    let _ = writeln!(
        out,
        "best epoch {} (val {:.6}){}; checkpoint {}, history {}",
        outcome.best_epoch,
        outcome.best.best_val_loss.unwrap_or(f64::NAN),
        if outcome.stopped_early { ", stopped early" } else { "" },
        a.out.display(),
        history_path.display()
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    data: &'a Path,
    ckpt: &'a Path,
    split: &'a str,
    threshold: f64,
    iou_mode: IouMode,
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let mode: IouMode = a.iou_mode.into();
    echo(
        out,
        &EvalEcho {
            data: &a.data,
            ckpt: &a.ckpt,
            split: &a.split,
            threshold: a.threshold,
            iou_mode: mode,
        },
    )?;
    ensure!(
        a.threshold > 0.0 && a.threshold < 1.0,
        "--threshold must lie in (0, 1)"
    );
    let manifest = DatasetManifest::load(&a.data)?;
    manifest.split(&a.split)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let report = evaluate(&ckpt, &a.data, &manifest, &a.split, a.threshold, mode)?;

    let json = a.report.with_extension("json");
    let csv_path = a.report.with_extension("csv");
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    let f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    report.write_csv(std::io::BufWriter::new(f))?;

    let fmt = |v: Option<f64>, pct: bool| match v {
        Some(x) if pct => format!("{:.2}", 100.0 * x),
        Some(x) => format!("{x:.2}"),
        None => "-".into(),
    };
    let m = &report.mean;
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>8} {:>10} {:>8} {:>8}",
        "Dice", "mIoU", "Recall", "Precision", "F2", "HD"
    );
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>8} {:>10} {:>8} {:>8}",
        fmt(m.dice, true),
        fmt(m.miou, true),
        fmt(m.recall, true),
        fmt(m.precision, true),
        fmt(m.f2, true),
        fmt(m.hd, false)
    );
    let _ = writeln!(
        out,
        "{} slices, HD undefined on {}; report {} / {}",
        report.slices.len(),
        report.skipped.hd,
        json.display(),
        csv_path.display()
    );
    Ok(EXIT_OK)
}

fn read_slice_blob(path: &Path) -> Result<SliceRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = bytes.len() / 4;
    let side = (n as f64).sqrt().round() as usize;
    if bytes.len() % 4 != 0 || side == 0 || side * side != n {
        return Err(Error::Format {
            what: "slice image",
            detail: format!(
                "{}: {} bytes is not a square f32 plane",
                path.display(),
                bytes.len()
            ),
        });
    }
    let image: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if !image.iter().all(|v| (0.0..=1.0).contains(v)) {
        return Err(Error::Format {
            what: "slice image",
            detail: format!("{}: intensities outside [0, 1]", path.display()),
        });
    }
    Ok(SliceRecord {
        patient_id: "input".into(),
        slice_index: 0,
        size: side,
        image,
        mask: vec![0; n],
    })
}

/// Binary P5 image with values 0 and 255.
pub fn write_pgm(path: &Path, mask: &[u8], h: usize, w: usize) -> Result<()> {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(mask.iter().map(|&m| if m != 0 { 255u8 } else { 0 }));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct PredictEcho<'a> {
    ckpt: &'a Path,
    input: &'a Path,
    out: &'a Path,
    threshold: f64,
    preview: Option<&'a Path>,
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> Result<i32> {
    echo(
        out,
        &PredictEcho {
            ckpt: &a.ckpt,
            input: &a.input,
            out: &a.out,
            threshold: a.threshold,
            preview: a.preview.as_deref(),
        },
    )?;
    ensure!(
        a.threshold > 0.0 && a.threshold < 1.0,
        "--threshold must lie in (0, 1)"
    );
    let rec = read_slice_blob(&a.input)?;
    let model = Checkpoint::load(&a.ckpt)?.to_model()?;
    let c = model.config();
    let (x, _) = batch_tensors(&[&rec], c.encoder.in_channels, c.out_size)?;
    let mask = predict_mask(&model.forward(&x)?, a.threshold)?;
    let mask = if c.out_size == rec.size {
        mask
    } else {
        nearest_resize(&mask, c.out_size, c.out_size, rec.size, rec.size)
    };
    fs::write(&a.out, &mask).map_err(|e| Error::io(&a.out, e))?;
    if let Some(p) = &a.preview {
        write_pgm(p, &mask, rec.size, rec.size)?;
    }
    let fg = mask.iter().filter(|&&m| m == 1).count();
    let _ = writeln!(
        out,
        "mask {}x{}: {fg} foreground pixels -> {}",
        rec.size,
        rec.size,
        a.out.display()
    );
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct CountEcho<'a> {
    preset: &'a str,
    input: Shape4,
    model: &'a PvtFormerConfig,
}

fn cmd_count(a: CountArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = PvtFormerConfig::preset(&a.config)?;
    let shape = Shape4::new(a.batch, cfg.encoder.in_channels, a.input, a.input);
    echo(
        out,
        &CountEcho {
            preset: &a.config,
            input: shape,
            model: &cfg,
        },
    )?;
    let report = complexity(&cfg, shape)?;
    if a.json {
        let _ = writeln!(out, "{}", report.to_json()?);
    } else {
        let _ = write!(out, "{}", report.to_table());
    }
    if a.verify {
        let model = PvtFormer::<f32>::new(&cfg, 0)?;
        let runtime = count_params(&model) as u64;
        let _ = writeln!(
            out,
            "runtime enumeration: {runtime} ({})",
            if runtime == report.params { "matches" } else { "MISMATCH" }
        );
        if runtime != report.params {
            return Ok(EXIT_RUNTIME);
        }
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let opts = GradCheckOptions {
        seed: a.seed,
        param_coords: a.coords,
        ..Default::default()
    };
    echo(out, &opts)?;
    let blocks: Vec<&str> = match &a.block {
        Some(b) => {
            ensure!(
                BLOCKS.contains(&b.as_str()),
                "unknown block `{b}`; known: {}",
                BLOCKS.join(", ")
            );
            vec![b.as_str()]
        }
        None => BLOCKS.to_vec(),
    };
    let _ = writeln!(
        out,
        "{:<30} {:>7} {:>8} {:>12}  result",
        "block", "coords", "redrawn", "max rel err"
    );
    let mut failed = Vec::new();
    for b in blocks {
        let r = run_block(b, &opts)?;
        let _ = writeln!(
            out,
            "{:<30} {:>7} {:>8} {:>12.3e}  {}",
            r.block,
            r.coords,
            r.redrawn,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(format!("{} (worst {})", r.block, r.worst));
        }
    }
    if failed.is_empty() {
        let _ = writeln!(out, "all blocks below {:e}", opts.tolerance);
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(out, "failed: {}", failed.join("; "));
        Ok(EXIT_RUNTIME)
    }
}
