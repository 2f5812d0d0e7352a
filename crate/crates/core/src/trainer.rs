//! Mini-batch training with Adam and early stopping, plus evaluation.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::zero_grads;
use crate::checkpoint::Checkpoint;
use crate::data::{batch_tensors, load_split, DatasetManifest, SliceRecord};
use crate::error::{ensure, Error, Result};
use crate::losses::{combined_loss_with_grad, LossConfig, LossValue};
use crate::metrics::{aggregate, evaluate_slice, IouMode, Mask, MetricsReport};
use crate::model::{predict_mask, PvtFormer, PvtFormerConfig};
use crate::optim::{Adam, AdamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Train the tiny preset instead of the full model.
    pub tiny_mode: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            max_epochs: 500,
            patience: 50,
            seed: 0,
            tiny_mode: false,
            max_steps: None,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(self.max_epochs > 0, "max_epochs must be positive");
        ensure!(
            self.patience > 0 && self.patience <= self.max_epochs,
            "patience {} must lie in 1..={}",
            self.patience,
            self.max_epochs
        );
        ensure!(
            self.threshold > 0.0 && self.threshold < 1.0,
            "threshold must lie in (0, 1)"
        );
        self.adam.validate()
    }

    pub fn model_config(&self) -> PvtFormerConfig {
        if self.tiny_mode {
            PvtFormerConfig::tiny()
        } else {
            PvtFormerConfig::default_b3()
        }
    }
}

/// Stops once the monitored value has not improved for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records the value for a (1-based) epoch. Improvement is a strict
    /// decrease.
    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        let improved = self.best.map_or(true, |b| value < b);
        if improved {
            self.best = Some(value);
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Model and optimizer state for step-level control.
pub struct Trainer {
    pub model: PvtFormer<f32>,
    pub adam: Adam<f32>,
    pub loss: LossConfig,
    steps: usize,
}

impl Trainer {
    pub fn new(model_cfg: &PvtFormerConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: PvtFormer::new(model_cfg, cfg.seed)?,
            adam: Adam::new(cfg.adam)?,
            loss: cfg.loss,
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn input_size(&self) -> (usize, usize) {
        let c = self.model.config();
        (c.encoder.in_channels, c.out_size)
    }

    /// Forward in training mode, back-propagate the combined loss, one Adam
    /// update. Aborts on a non-finite loss.
    pub fn train_step(&mut self, batch: &[&SliceRecord]) -> Result<LossValue> {
        let (c, s) = self.input_size();
        let (x, y) = batch_tensors(batch, c, s)?;
        let logits = self.model.forward_train(&x)?;
        let (loss, grad) = combined_loss_with_grad(&logits, &y, &self.loss)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "step {}: loss {:?} (bce {}, dice {})",
                self.steps + 1,
                loss.total,
                loss.bce,
                loss.dice
            )));
        }
        zero_grads(&mut self.model);
        self.model.backward(&grad)?;
        self.adam.step(&mut self.model);
        self.steps += 1;
        Ok(loss)
    }

    /// Mean evaluation-mode loss over `records`, weighted by batch size.
    pub fn eval_loss(&self, records: &[SliceRecord], batch_size: usize) -> Result<f64> {
        eval_loss(&self.model, records, batch_size, &self.loss)
    }
}

pub fn eval_loss(
    model: &PvtFormer<f32>,
    records: &[SliceRecord],
    batch_size: usize,
    loss: &LossConfig,
) -> Result<f64> {
    ensure!(!records.is_empty(), "no records to evaluate");
    let c = model.config();
    let mut total = 0.0;
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceRecord> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs, c.encoder.in_channels, c.out_size)?;
        let (l, _) = combined_loss_with_grad(&model.forward_logits(&x)?, &y, loss)?;
        total += l.total * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Training loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn write_history_csv(&self, out: impl Write) -> Result<()> {
        write_history_csv(&self.history, out)
    }
}

pub fn write_history_csv(history: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Csv(e.to_string()))
}

/// Full training run over the `train` split with `val` monitoring.
/// `on_epoch` sees each epoch record as it completes.
pub fn train(
    model_cfg: &PvtFormerConfig,
    cfg: &TrainConfig,
    root: &Path,
    manifest: &DatasetManifest,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let train_set = load_split(root, manifest, "train")?;
    let val_set = load_split(root, manifest, "val")?;
    fit(model_cfg, cfg, &train_set, &val_set, on_epoch)
}

/// In-memory variant of [`train`].
pub fn fit(
    model_cfg: &PvtFormerConfig,
    cfg: &TrainConfig,
    train_set: &[SliceRecord],
    val_set: &[SliceRecord],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    ensure!(!train_set.is_empty(), "training split is empty");
    ensure!(!val_set.is_empty(), "validation split is empty");
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best = Checkpoint::capture(&trainer.model, 0, None, Some(&trainer.adam));
    let mut stopped_early = false;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        let mut out_of_steps = false;
        for idx in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| trainer.steps() >= m) {
                out_of_steps = true;
                break;
            }
            let batch: Vec<&SliceRecord> = idx.iter().map(|&i| &train_set[i]).collect();
            let l = trainer.train_step(&batch)?;
            step_losses.push(l.total);
            sum += l.total * batch.len() as f64;
            seen += batch.len();
        }
        if seen == 0 {
            break 'epochs;
        }
        let record = EpochRecord {
            epoch,
            train_loss: sum / seen as f64,
            val_loss: trainer.eval_loss(val_set, cfg.batch_size)?,
        };
        if !record.val_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "epoch {epoch}: validation loss {}",
                record.val_loss
            )));
        }
        on_epoch(&record);
        let d = stopper.observe(epoch, record.val_loss);
        history.push(record);
        if d.improved {
            best = Checkpoint::capture(&trainer.model, epoch, stopper.best(), Some(&trainer.adam));
        }
        if d.stop {
            stopped_early = true;
            break;
        }
        if out_of_steps || cfg.max_steps.is_some_and(|m| trainer.steps() >= m) {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        history,
        step_losses,
        best_epoch: stopper.best_epoch(),
        stopped_early,
    })
}

/// Per-slice metrics of thresholded predictions, in record order.
pub fn evaluate_records(
    model: &PvtFormer<f32>,
    records: &[SliceRecord],
    threshold: f64,
    mode: IouMode,
) -> Result<MetricsReport> {
    ensure!(!records.is_empty(), "split is empty");
    let c = model.config();
    let size = c.out_size;
    let mut slices = Vec::with_capacity(records.len());
    for chunk in records.chunks(8) {
        let refs: Vec<&SliceRecord> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs, c.encoder.in_channels, size)?;
        let pred = predict_mask(&model.forward(&x)?, threshold)?;
        let plane = size * size;
        for (i, r) in chunk.iter().enumerate() {
            let p = Mask::new(size, size, pred[i * plane..(i + 1) * plane].to_vec())?;
            let gt = Mask::new(
                size,
                size,
                y.image(i).iter().map(|&v| u8::from(v > 0.5)).collect(),
            )?;
            slices.push(evaluate_slice(&r.id(), &p, &gt, mode)?);
        }
    }
    aggregate(slices, mode)
}

/// Loads `split` and evaluates a checkpoint on it.
pub fn evaluate(
    checkpoint: &Checkpoint,
    root: &Path,
    manifest: &DatasetManifest,
    split: &str,
    threshold: f64,
    mode: IouMode,
) -> Result<MetricsReport> {
    let records = load_split(root, manifest, split)?;
    ensure!(!records.is_empty(), "split `{split}` is empty");
    evaluate_records(&checkpoint.to_model()?, &records, threshold, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_example() {
        let mut s = EarlyStopping::new(2);
        let seq = [1.0, 0.9, 0.95, 0.97];
        let mut stopped_at = None;
        for (i, &v) in seq.iter().enumerate() {
            if s.observe(i + 1, v).stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(s.best_epoch(), 2);
        assert_eq!(s.best(), Some(0.9));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 600,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn history_csv_columns() {
        let h = vec![EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.25,
        }];
        let mut buf = Vec::new();
        write_history_csv(&h, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_loss\n1,0.5,0.25\n");
    }
}
