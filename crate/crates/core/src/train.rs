//! Training loop, evaluation and inference.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, TrainConfig};
use crate::data::{
    augment, load_isic_dir, load_manifest, normalize, read_rgb, save_mask_png, save_overlay_png,
    stack_batch, synth_dataset, SegSample,
};
use crate::error::{Error, Result};
use crate::loss::{total_loss, HEAD_NAMES};
use crate::metrics::{confusion, metric_suite, ConfusionMatrix, MetricReport};
use crate::model::SegModel;
use crate::nn::{Ctx, ParamStore};
use crate::optim::{clip_grad_norm, Adam};
use crate::rng::RngStream;
use crate::tensor::{bilinear_resize_plane, Graph, Tensor};

/// Loads every sample of the configured data source at the model size.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Vec<SegSample>> {
    let size = cfg.model.image_size;
    let all = match &cfg.data {
        DataSource::Synthetic { n } => synth_dataset(*n, cfg.seed, size)?,
        DataSource::Isic { images, masks } => {
            let (samples, report) = load_isic_dir(images, masks, size)?;
            for (path, reason) in &report.entries {
                eprintln!("skipped {}: {reason}", path.display());
            }
            samples
        }
        DataSource::Manifest(path) => load_manifest(path, size)?,
    };
    if all.is_empty() {
        return Err(Error::config("the dataset is empty"));
    }
    Ok(all)
}

/// Loads the configured dataset and splits off the validation tail. With
/// `val_fraction = 0` the training set doubles as the validation set.
pub fn load_data(cfg: &TrainConfig) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let all = load_dataset(cfg)?;
    if cfg.val_fraction == 0.0 {
        return Ok((all.clone(), all));
    }
    let n_val = ((all.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, all.len().saturating_sub(1).max(1));
    let mut train = all;
    let val = train.split_off(train.len() - n_val);
    if train.is_empty() {
        return Err(Error::config("val_fraction leaves no training samples"));
    }
    Ok((train, val))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Per-head losses (fused, transformer, coarse).
    pub head_losses: [f64; 3],
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValSummary {
    pub jaccard: f64,
    pub dice: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub step: u64,
    /// Mean loss over the epoch's steps.
    pub loss: f64,
    pub lr: f64,
    pub val: Option<ValSummary>,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,step,loss,lr,val_jaccard,val_dice,val_accuracy";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:.6},{:.3e}",
            self.epoch, self.step, self.loss, self.lr
        )?;
        match self.val {
            Some(v) => write!(f, ",{:.4},{:.4},{:.4}", v.jaccard, v.dice, v.accuracy),
            None => write!(f, ",,,"),
        }
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: SegModel,
    pub ps: ParamStore,
    pub adam: Adam,
    /// Drives batch order; saved in checkpoints.
    pub rng: RngStream,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub train_set: Vec<SegSample>,
    pub val_set: Vec<SegSample>,
    pub history: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (train, val) = load_data(&cfg)?;
        Self::with_data(cfg, train, val)
    }

    pub fn with_data(
        cfg: TrainConfig,
        train_set: Vec<SegSample>,
        val_set: Vec<SegSample>,
    ) -> Result<Self> {
        cfg.validate()?;
        let root = RngStream::from_seed(cfg.seed);
        let (model, ps) = SegModel::new(&cfg.model, &mut root.split_str("init"))?;
        let adam = Adam::new(&ps);
        Ok(Self {
            rng: root.split_str("batches"),
            cfg,
            model,
            ps,
            adam,
            epoch: 0,
            step: 0,
            train_set,
            val_set,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint. `cfg` may differ from the saved config
    /// only in run-length settings such as `epochs`.
    pub fn resume(
        cfg: TrainConfig,
        ck: &Checkpoint,
        train_set: Vec<SegSample>,
        val_set: Vec<SegSample>,
    ) -> Result<Self> {
        let saved = TrainConfig::parse(&ck.config_text)?;
        if saved.model != cfg.model || saved.seed != cfg.seed {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different model or seed".into(),
            ));
        }
        let mut t = Self::with_data(cfg, train_set, val_set)?;
        ck.restore_into(&mut t.ps)?;
        t.adam = ck.adam.clone();
        t.rng = RngStream::from_state(ck.rng);
        t.epoch = ck.epoch as usize;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.cfg.to_text(),
            &self.ps,
            &self.adam,
            self.epoch as u64,
            self.step,
            self.rng.state(),
        )
    }

    /// Forward, loss, backward and one Adam update on a batch.
    pub fn train_step(&mut self, batch: &[&SegSample], lr: f64) -> Result<StepRecord> {
        let (images, masks) = stack_batch(batch)?;
        let mut g = Graph::new();
        let x = g.constant(&images);
        let out = self
            .model
            .forward(&mut Ctx::new(&mut g, &self.ps, true), x)?;
        let terms = total_loss(&mut g, out.heads(), &masks, &self.cfg.model.loss)?;
        let head_losses = terms.per_head.map(|v| g.item(v));
        let loss = g.item(terms.total);
        let bad: Vec<&str> = HEAD_NAMES
            .iter()
            .zip(&head_losses)
            .filter(|(_, l)| !l.is_finite())
            .map(|(n, _)| *n)
            .collect();
        if !bad.is_empty() || !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at step {} from head(s) [{}]; per-head losses {:?}",
                self.step + 1,
                bad.join(", "),
                head_losses
            )));
        }
        g.backward(terms.total)?;
        self.ps.zero_grad();
        self.ps.accumulate_grads(&g);
        self.ps.apply_buffer_updates(&mut g);
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => clip_grad_norm(&mut self.ps, c),
            None => crate::optim::grad_norm(&self.ps),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite gradient norm at step {}",
                self.step + 1
            )));
        }
        self.adam.update(&mut self.ps, lr)?;
        self.step += 1;
        let rec = StepRecord {
            step: self.step,
            loss,
            head_losses,
            grad_norm,
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// One pass over the shuffled training set.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let lr = self.cfg.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        self.rng.shuffle(&mut order);
        let augmented: Option<Vec<SegSample>> = self.cfg.augment.as_ref().map(|a| {
            let epoch = self.epoch;
            self.train_set
                .par_iter()
                .map(|s| augment(s, a, &mut a.stream(&s.id, epoch)))
                .collect()
        });
        let source = augmented.unwrap_or_else(|| self.train_set.clone());
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&SegSample> = chunk.iter().map(|&i| &source[i]).collect();
            total += self.train_step(&batch, lr)?.loss;
            steps += 1;
        }
        self.epoch += 1;
        let val =
            if self.epoch.is_multiple_of(self.cfg.eval_interval) || self.epoch == self.cfg.epochs {
                let report = evaluate(&self.model, &self.ps, &self.val_set, self.cfg.threshold)?;
                let m = &report.aggregate;
                Some(ValSummary {
                    jaccard: m.jaccard,
                    dice: m.f_measure,
                    accuracy: m.accuracy,
                })
            } else {
                None
            };
        if let Some(path) = &self.cfg.checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(EpochLog {
            epoch: self.epoch,
            step: self.step,
            loss: total / steps as f64,
            lr,
            val,
        })
    }

    /// Runs the remaining epochs, reporting each log line.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < self.cfg.epochs {
            let log = self.run_epoch()?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Trains from scratch and returns the final checkpoint and epoch logs.
pub fn train(
    cfg: TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let mut t = Trainer::new(cfg)?;
    let logs = t.run(on_epoch)?;
    Ok((t.checkpoint(), logs))
}

/// Rebuilds the model described by a checkpoint, with its weights.
pub fn load_model(ck: &Checkpoint) -> Result<(TrainConfig, SegModel, ParamStore)> {
    let cfg = TrainConfig::parse(&ck.config_text)?;
    let (model, mut ps) = SegModel::new(&cfg.model, &mut RngStream::from_seed(0))?;
    ck.restore_into(&mut ps)?;
    Ok((cfg, model, ps))
}

/// Eval-mode confusion matrix for one sample.
pub fn sample_confusion(
    model: &SegModel,
    ps: &ParamStore,
    s: &SegSample,
    threshold: f64,
) -> Result<ConfusionMatrix> {
    let (h, w) = s.size();
    let image = s.image.reshape(&[1, 3, h, w])?;
    let prob = model.predict(ps, &image)?;
    confusion(prob.data(), s.mask.data(), threshold)
}

/// Per-sample and pooled metrics, one graph per sample across threads.
pub fn evaluate(
    model: &SegModel,
    ps: &ParamStore,
    samples: &[SegSample],
    threshold: f64,
) -> Result<MetricReport> {
    let items = samples
        .par_iter()
        .map(|s| Ok((s.id.clone(), sample_confusion(model, ps, s, threshold)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_confusions(&items))
}

/// Mean Dice over samples, a convenience for reporting.
pub fn mean_dice(report: &MetricReport) -> f64 {
    if report.samples.is_empty() {
        return 0.0;
    }
    report.samples.iter().map(|r| r.f_measure).sum::<f64>() / report.samples.len() as f64
}

pub struct InferOutput {
    pub mask: PathBuf,
    pub overlay: PathBuf,
    pub foreground_fraction: f64,
}

/// Segments one image file and writes `<stem>_mask.png` and
/// `<stem>_overlay.png` at the original resolution.
pub fn infer(
    model: &SegModel,
    ps: &ParamStore,
    image_path: &Path,
    out_dir: &Path,
    threshold: f64,
) -> Result<InferOutput> {
    let (raw, (h0, w0)) = read_rgb(image_path)?;
    let (h, w) = model.config.image_size;
    let mut planes = Vec::with_capacity(3 * h * w);
    for plane in raw.chunks(h0 * w0) {
        planes.extend(bilinear_resize_plane(plane, h0, w0, h, w));
    }
    normalize(&mut planes);
    let prob = model.predict(ps, &Tensor::from_vec(&[1, 3, h, w], planes)?)?;
    let full = bilinear_resize_plane(prob.data(), h, w, h0, w0);
    let mask: Vec<bool> = full.iter().map(|&p| p >= threshold).collect();
    std::fs::create_dir_all(out_dir)?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let mask_path = out_dir.join(format!("{stem}_mask.png"));
    let overlay_path = out_dir.join(format!("{stem}_overlay.png"));
    save_mask_png(&mask_path, &mask, h0, w0)?;
    save_overlay_png(&overlay_path, &raw, &mask, h0, w0, [255, 32, 32])?;
    Ok(InferOutput {
        mask: mask_path,
        overlay: overlay_path,
        foreground_fraction: mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64,
    })
}

/// Aggregate metrics straight from a confusion matrix, for log lines.
pub fn summarize(c: &ConfusionMatrix) -> ValSummary {
    let m = metric_suite(c);
    ValSummary {
        jaccard: m.jaccard,
        dice: m.dice,
        accuracy: m.accuracy,
    }
}
