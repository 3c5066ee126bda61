//! Semi-supervised training of the twin-decoder model: supervised loss on
//! labeled batches, pseudo-label consistency plus the shape-prior term on
//! unlabeled batches, SGD with a polynomial schedule, validation-based model
//! selection, and resumable checkpoints.

mod loss;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{augment, AugmentationParams, BatchSampler, DatasetSplit, ImageRecord};
use crate::error::{Error, Result};
use crate::metrics::evaluate_with;
use crate::optim::Sgd;
use crate::params;
use crate::segmodel::{images_to_tensor, masks_to_tensor, Branch, Mode, SegModel};
use crate::shape_prior::DiscriminatorHandle;

pub use loss::{
    cross_entropy, poly_lr, pseudo_label, supervised_loss, total_loss, unsupervised_loss,
    LossWeights, UnsupervisedTerms,
};

pub const TRAINER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub init_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub labeled_bs: usize,
    pub unlabeled_bs: usize,
    /// Iterations per epoch. Defaults to one pass over the unlabeled pool,
    /// or over the labeled pool when there is no unlabeled data.
    pub iters_per_epoch: Option<usize>,
    /// Linear ramp of `gamma` from 0 over this many epochs; 0 disables it.
    pub gamma_rampup_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            init_lr: 1e-3,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 200,
            labeled_bs: 8,
            unlabeled_bs: 8,
            iters_per_epoch: None,
            gamma_rampup_epochs: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.init_lr > 0.0 && self.init_lr.is_finite()) {
            return Err(Error::invalid("init_lr must be positive"));
        }
        if !(self.power > 0.0 && self.power <= 1.0) {
            return Err(Error::invalid("power must lie in (0, 1]"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        if self.labeled_bs == 0 || self.unlabeled_bs == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.iters_per_epoch == Some(0) {
            return Err(Error::invalid("iters_per_epoch must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub weights: LossWeights,
    pub augmentation: AugmentationParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            weights: LossWeights::default(),
            augmentation: AugmentationParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.weights.validate()?;
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_s: f64,
    pub l_u_ce: f64,
    /// The weighted shape-prior term, zero without a prior.
    pub l_u_dsr: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub l_s: f64,
    pub l_u_ce: f64,
    pub l_u_dsr: f64,
    pub l_total: f64,
    pub val_dice: Option<f64>,
    pub val_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub epoch: usize,
    pub max_iter: usize,
    pub iters_per_epoch: usize,
    pub best_val_dice: Option<f64>,
    pub best_epoch: Option<usize>,
    pub latest_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

/// Everything besides tensors that a resumable checkpoint carries.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerMeta {
    format_version: u32,
    config: TrainConfig,
    split: DatasetSplit,
    state: TrainState,
    sampler: BatchSampler,
    augment_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    dsr_checksum: Option<String>,
    history: Vec<EpochRecord>,
    iterations: Vec<IterRecord>,
}

pub struct TrainOutcome {
    /// The model with the best-validation weights loaded (the final weights
    /// when there is no validation set).
    pub model: SegModel,
    pub history: Vec<EpochRecord>,
    pub iterations: Vec<IterRecord>,
    pub best_val_dice: Option<f64>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub struct Trainer {
    model: SegModel,
    dsr: Option<DiscriminatorHandle>,
    cfg: TrainConfig,
    split: DatasetSplit,
    records: BTreeMap<String, ImageRecord>,
    sampler: BatchSampler,
    opt: Sgd,
    augment_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    state: TrainState,
    history: Vec<EpochRecord>,
    iterations: Vec<IterRecord>,
    best: Option<BTreeMap<String, Tensor>>,
}

impl Trainer {
    /// `records` must contain every id of the split. Unlabeled records are
    /// stripped of their masks on the way in.
    pub fn new(
        mut model: SegModel,
        dsr: Option<DiscriminatorHandle>,
        records: &[ImageRecord],
        split: &DatasetSplit,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.augmentation.crop_to != model.spec().input_size {
            return Err(Error::Config(format!(
                "augmentation crop_to {} must equal the model input_size {}",
                cfg.augmentation.crop_to,
                model.spec().input_size
            )));
        }
        if split.labeled_ids.is_empty() {
            return Err(Error::invalid("the labeled pool is empty"));
        }
        let by_id: BTreeMap<&str, &ImageRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut kept = BTreeMap::new();
        let fetch = |id: &String| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("split id {id} has no record")))
        };
        for id in split.labeled_ids.iter().chain(&split.val_ids) {
            let r = fetch(id)?;
            r.mask_or_err()?;
            kept.insert(id.clone(), r.clone());
        }
        for id in &split.unlabeled_ids {
            let r = fetch(id)?;
            kept.insert(
                id.clone(),
                ImageRecord {
                    mask: None,
                    ..r.clone()
                },
            );
        }
        let o = &cfg.optim;
        let ipe = o.iters_per_epoch.unwrap_or_else(|| {
            if split.unlabeled_ids.is_empty() {
                split.labeled_ids.len().div_ceil(o.labeled_bs)
            } else {
                split.unlabeled_ids.len().div_ceil(o.unlabeled_bs)
            }
        });
        model.set_inference_branch(if split.unlabeled_ids.is_empty() {
            Branch::Labeled
        } else {
            Branch::Prior
        });
        Ok(Self {
            sampler: BatchSampler::new(split, o.labeled_bs, o.unlabeled_bs, cfg.seed),
            opt: Sgd::new(o.momentum, o.weight_decay),
            augment_rng: rng_stream(cfg.seed, 21),
            dropout_rng: rng_stream(cfg.seed, 22),
            state: TrainState {
                iteration: 0,
                epoch: 0,
                max_iter: ipe * o.epochs,
                iters_per_epoch: ipe,
                best_val_dice: None,
                best_epoch: None,
                latest_checkpoint: None,
                best_checkpoint: None,
            },
            model,
            dsr,
            split: split.clone(),
            records: kept,
            cfg,
            history: Vec::new(),
            iterations: Vec::new(),
            best: None,
        })
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn iteration_log(&self) -> &[IterRecord] {
        &self.iterations
    }

    pub fn dsr(&self) -> Option<&DiscriminatorHandle> {
        self.dsr.as_ref()
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.optim.epochs
    }

    fn batch(&mut self, ids: &[String]) -> Result<(Tensor, Option<Tensor>)> {
        let mut images = Vec::with_capacity(ids.len());
        let mut masks = Vec::with_capacity(ids.len());
        for id in ids {
            let rec = augment(
                &self.records[id],
                &self.cfg.augmentation,
                &mut self.augment_rng,
            )?;
            images.push(rec.image);
            if let Some(m) = rec.mask {
                masks.push(m);
            }
        }
        let dev = self.model.device();
        let x = images_to_tensor(&images, dev)?;
        let y = if masks.len() == ids.len() {
            Some(masks_to_tensor(&masks, dev)?)
        } else {
            None
        };
        Ok((x, y))
    }

    fn gamma(&self) -> f64 {
        let ramp = self.cfg.optim.gamma_rampup_epochs * self.state.iters_per_epoch;
        let scale = if ramp == 0 {
            1.0
        } else {
            (self.state.iteration as f64 / ramp as f64).min(1.0)
        };
        self.cfg.weights.gamma * scale
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<IterRecord> {
        let (lids, uids) = self.sampler.next_batches();
        let o = &self.cfg.optim;
        let lr = poly_lr(
            self.state.iteration,
            self.state.max_iter,
            o.init_lr,
            o.power,
        )?;
        let (xl, yl) = self.batch(&lids)?;
        let yl = yl.ok_or_else(|| Error::invalid("labeled batch without masks"))?;
        let ls = supervised_loss(&self.model, &xl, &yl, Mode::Train)?;
        let (total, lu_ce, lu_dsr) = if uids.is_empty() {
            (ls.clone(), 0.0, 0.0)
        } else {
            let (xu, _) = self.batch(&uids)?;
            let weights = LossWeights {
                gamma: self.gamma(),
                ..self.cfg.weights.clone()
            };
            let terms = unsupervised_loss(
                &self.model,
                self.dsr.as_ref(),
                &xu,
                &uids,
                &self.model.spec().dropout,
                &weights,
                &mut self.dropout_rng,
                Mode::Train,
            )?;
            (
                total_loss(&ls, &terms.total, &weights)?,
                terms.consistency.to_scalar::<f64>()?,
                terms.shape.to_scalar::<f64>()?,
            )
        };
        let l_total = total.to_scalar::<f64>()?;
        let l_s = ls.to_scalar::<f64>()?;
        if !l_total.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                detail: format!(
                    "at iteration {} on labeled [{}] unlabeled [{}]",
                    self.state.iteration,
                    lids.join(", "),
                    uids.join(", ")
                ),
            });
        }
        let grads = total.backward()?;
        self.opt.step(&self.model.trainable(), &grads, lr)?;
        let rec = IterRecord {
            iteration: self.state.iteration,
            epoch: self.state.epoch,
            lr,
            l_s,
            l_u_ce: lu_ce,
            l_u_dsr: lu_dsr,
            l_total,
        };
        self.state.iteration += 1;
        self.iterations.push(rec.clone());
        Ok(rec)
    }

    /// Dice and IoU (percent) of the current model on the validation ids.
    pub fn validate(&self) -> Result<Option<(f64, f64)>> {
        if self.split.val_ids.is_empty() {
            return Ok(None);
        }
        let val: Vec<ImageRecord> = self
            .split
            .val_ids
            .iter()
            .map(|id| self.records[id].clone())
            .collect();
        let report = evaluate_with(&val, BTreeMap::new(), |ims| self.model.predict_batch(ims))?;
        Ok(Some((report.mean_dice, report.mean_iou)))
    }

    /// Run one epoch, validate, and keep the weights if they are the best so far.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.is_done() {
            return Err(Error::invalid("training already finished"));
        }
        let n = self.state.iters_per_epoch;
        let mut sums = [0f64; 4];
        let mut lr = 0.0;
        for _ in 0..n {
            let r = self.step()?;
            for (s, v) in sums.iter_mut().zip([r.l_s, r.l_u_ce, r.l_u_dsr, r.l_total]) {
                *s += v;
            }
            lr = r.lr;
        }
        let val = self.validate()?;
        let epoch = self.state.epoch;
        let better = match (val, self.state.best_val_dice) {
            (Some((d, _)), Some(best)) => d > best,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if better {
            self.state.best_val_dice = val.map(|v| v.0);
            self.state.best_epoch = Some(epoch);
            self.best = Some(self.model.snapshot()?);
        }
        let k = n as f64;
        let rec = EpochRecord {
            epoch,
            iterations: n,
            lr,
            l_s: sums[0] / k,
            l_u_ce: sums[1] / k,
            l_u_dsr: sums[2] / k,
            l_total: sums[3] / k,
            val_dice: val.map(|v| v.0),
            val_iou: val.map(|v| v.1),
        };
        self.state.epoch += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Run the remaining epochs and hand back the selected model.
    pub fn train(mut self) -> Result<TrainOutcome> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        self.finish()
    }

    pub fn finish(self) -> Result<TrainOutcome> {
        if let Some(best) = &self.best {
            self.model.load_snapshot(best)?;
        }
        Ok(TrainOutcome {
            model: self.model,
            history: self.history,
            iterations: self.iterations,
            best_val_dice: self.state.best_val_dice,
        })
    }

    /// The best-validation weights in model-checkpoint form (current weights
    /// when nothing has been selected yet).
    pub fn save_best(&mut self, path: &Path) -> Result<()> {
        let tensors = match &self.best {
            Some(b) => b.clone(),
            None => self.model.snapshot()?,
        };
        let meta = serde_json::json!({ "model": self.model.meta() });
        params::save_safetensors(path, &tensors, &meta)?;
        self.state.best_checkpoint = Some(path.to_path_buf());
        Ok(())
    }

    /// Everything needed to resume: weights, optimizer buffers, best
    /// weights, sampler and rng positions, logs. Also loadable as a model.
    pub fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.state.latest_checkpoint = Some(path.to_path_buf());
        let mut tensors = self.model.snapshot()?;
        tensors.extend(params::prefixed("optim", self.opt.state()));
        if let Some(best) = &self.best {
            tensors.extend(params::prefixed("best", best));
        }
        let meta = TrainerMeta {
            format_version: TRAINER_FORMAT_VERSION,
            config: self.cfg.clone(),
            split: self.split.clone(),
            state: self.state.clone(),
            sampler: self.sampler.clone(),
            augment_rng: self.augment_rng.clone(),
            dropout_rng: self.dropout_rng.clone(),
            dsr_checksum: self.dsr.as_ref().map(|d| d.checksum()).transpose()?,
            history: self.history.clone(),
            iterations: self.iterations.clone(),
        };
        let value = serde_json::json!({ "model": self.model.meta(), "trainer": meta });
        params::save_safetensors(path, &tensors, &value)
    }

    /// Continue from [`Trainer::save_checkpoint`]. The prior must be the one
    /// the run started with.
    pub fn resume(
        path: &Path,
        dsr: Option<DiscriminatorHandle>,
        records: &[ImageRecord],
    ) -> Result<Self> {
        let ckpt_err = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let model = SegModel::load(path, &candle_core::Device::Cpu)?;
        let (tensors, value) = params::load_safetensors(path, model.device())?;
        let meta: TrainerMeta = serde_json::from_value(
            value
                .get("trainer")
                .cloned()
                .ok_or_else(|| ckpt_err("no trainer state in checkpoint".into()))?,
        )?;
        if meta.format_version != TRAINER_FORMAT_VERSION {
            return Err(ckpt_err(format!(
                "unsupported trainer state v{}",
                meta.format_version
            )));
        }
        let dsr_sum = dsr.as_ref().map(|d| d.checksum()).transpose()?;
        if dsr_sum != meta.dsr_checksum {
            return Err(ckpt_err(
                "shape prior differs from the one this run started with".into(),
            ));
        }
        let branch = model.inference_branch();
        let mut trainer = Self::new(model, dsr, records, &meta.split, meta.config)?;
        trainer.model.set_inference_branch(branch);
        trainer
            .opt
            .load_state(params::strip_prefix("optim", &tensors));
        let best = params::strip_prefix("best", &tensors);
        trainer.best = (!best.is_empty()).then_some(best);
        trainer.sampler = meta.sampler;
        trainer.augment_rng = meta.augment_rng;
        trainer.dropout_rng = meta.dropout_rng;
        trainer.state = meta.state;
        trainer.history = meta.history;
        trainer.iterations = meta.iterations;
        Ok(trainer)
    }
}

/// Semi-supervised training; without a prior this is the no-shape-prior arm.
pub fn train(
    model: SegModel,
    dsr: Option<DiscriminatorHandle>,
    records: &[ImageRecord],
    split: &DatasetSplit,
    cfg: TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(model, dsr, records, split, cfg)?.train()
}

/// Supervised loss only, on the labeled pool, with the same schedule. The
/// labeled decoder serves predictions.
pub fn train_labeled_only_baseline(
    model: SegModel,
    records: &[ImageRecord],
    split: &DatasetSplit,
    cfg: TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(model, None, records, &split.labeled_only(), cfg)?.train()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `iteration,epoch,lr,l_s,l_u_ce,l_u_dsr,l_total`.
pub fn write_iteration_csv(path: &Path, rows: &[IterRecord]) -> Result<()> {
    write_csv(path, rows)
}

/// `epoch,iterations,lr,l_s,l_u_ce,l_u_dsr,l_total,val_dice,val_iou`.
pub fn write_epoch_csv(path: &Path, rows: &[EpochRecord]) -> Result<()> {
    write_csv(path, rows)
}

/// One JSON object per line, iterations followed by their epoch summary.
pub fn write_events_jsonl(
    path: &Path,
    iterations: &[IterRecord],
    epochs: &[EpochRecord],
) -> Result<()> {
    let mut out = String::new();
    let mut it = iterations.iter().peekable();
    for e in epochs {
        while let Some(r) = it.next_if(|r| r.epoch == e.epoch) {
            out.push_str(&serde_json::to_string(
                &serde_json::json!({"event": "iteration", "data": r}),
            )?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(
            &serde_json::json!({"event": "epoch", "data": e}),
        )?);
        out.push('\n');
    }
    for r in it {
        out.push_str(&serde_json::to_string(
            &serde_json::json!({"event": "iteration", "data": r}),
        )?);
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
