//! Adversarial shape prior: a WGAN-GP trained on 64x64 masks whose critic is
//! kept afterwards as a differentiable plausibility score.

mod loss;
mod nets;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::VarBuilder;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::PRIOR_SIZE;
use crate::error::{Error, Result};
use crate::optim::RmsProp;
use crate::params::{self, ParamStore};

pub use loss::{critic_loss, generator_loss, gradient_penalty, interpolates, CriticTerms};
pub use nets::{Critic, DiscriminatorSpec, Generator, GeneratorSpec, Scorer};

pub const PRIOR_FORMAT_VERSION: u32 = 1;
const PRIOR_KIND: &str = "shape_prior";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the mask set. Each pass walks it in shuffled batches
    /// (the incomplete tail batch is dropped), one critic update per batch.
    pub epochs: usize,
    pub gp_weight: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 16,
            epochs: 5000,
            gp_weight: 10.0,
            critic_steps: 5,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("prior learning_rate must be positive"));
        }
        if !(self.gp_weight > 0.0 && self.gp_weight.is_finite()) {
            return Err(Error::invalid("gp_weight must be positive"));
        }
        if self.batch_size == 0 || self.critic_steps == 0 {
            return Err(Error::invalid(
                "batch_size and critic_steps must be positive",
            ));
        }
        Ok(())
    }
}

/// What a prior checkpoint records besides its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMeta {
    pub kind: String,
    pub format_version: u32,
    pub disc: DiscriminatorSpec,
    pub gen: GeneratorSpec,
    pub train: GanTrainConfig,
    /// Epochs actually completed; smaller than `train.epochs` for a checkpoint
    /// salvaged from an aborted run.
    pub epochs_completed: usize,
}

/// A frozen critic. Its tensors are plain constants, so no backward pass can
/// produce gradients for them and no optimizer can reach them.
#[derive(Clone)]
pub struct DiscriminatorHandle {
    critic: Critic,
    tensors: BTreeMap<String, Tensor>,
    meta: PriorMeta,
    dtype: DType,
}

impl std::fmt::Debug for DiscriminatorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscriminatorHandle")
            .field("meta", &self.meta)
            .finish()
    }
}

impl DiscriminatorHandle {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>, meta: PriorMeta) -> Result<Self> {
        meta.disc.validate()?;
        let (dtype, device) = match tensors.values().next() {
            Some(t) => (t.dtype(), t.device().clone()),
            None => return Err(Error::invalid("discriminator has no tensors")),
        };
        let tensors: BTreeMap<String, Tensor> = tensors
            .into_iter()
            .map(|(k, v)| Ok((k, v.detach().copy()?)))
            .collect::<Result<_>>()?;
        let map = tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let vb = VarBuilder::from_tensors(map, dtype, &device);
        let critic = Critic::new(&meta.disc, vb)?;
        Ok(Self {
            critic,
            tensors,
            meta,
            dtype,
        })
    }

    pub fn meta(&self) -> &PriorMeta {
        &self.meta
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn checksum(&self) -> Result<String> {
        params::checksum(&self.tensors)
    }

    /// Scores for a `B x 1 x 64 x 64` (or `B x 64 x 64`) batch, in the
    /// input's dtype.
    pub fn score(&self, masks: &Tensor) -> Result<Tensor> {
        let in_dtype = masks.dtype();
        let out = self.critic.score(&masks.to_dtype(self.dtype)?)?;
        Ok(out.to_dtype(in_dtype)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        params::save_safetensors(path, &self.tensors, &serde_json::to_value(&self.meta)?)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let (tensors, meta) = params::load_safetensors(path, device)?;
        let meta: PriorMeta = serde_json::from_value(meta)?;
        if meta.kind != PRIOR_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("expected a {PRIOR_KIND} checkpoint, found {}", meta.kind),
            });
        }
        if meta.format_version != PRIOR_FORMAT_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("unsupported format version {}", meta.format_version),
            });
        }
        Self::from_tensors(tensors, meta).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

impl Scorer for DiscriminatorHandle {
    fn score(&self, masks: &Tensor) -> candle_core::Result<Tensor> {
        DiscriminatorHandle::score(self, masks).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => candle_core::Error::Msg(other.to_string()),
        })
    }
}

/// `-E[D(predicted)]`. Differentiable in `predicted`; the handle stays frozen.
pub fn dsr_loss(handle: &DiscriminatorHandle, predicted: &Tensor) -> Result<Tensor> {
    Ok(handle.score(predicted)?.mean_all()?.neg()?)
}

/// Per-epoch means of the training losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub critic_loss: f64,
    pub generator_loss: f64,
    pub gp_term: f64,
}

pub fn write_loss_csv(path: &Path, curve: &[LossRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::from("epoch,critic_loss,generator_loss,gp_term\n");
    for r in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.critic_loss, r.generator_loss, r.gp_term
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Stateful WGAN-GP loop, advanced one epoch at a time.
pub struct PriorTrainer {
    masks: Tensor,
    n: usize,
    gen_spec: GeneratorSpec,
    disc_spec: DiscriminatorSpec,
    cfg: GanTrainConfig,
    gen_store: ParamStore,
    disc_store: ParamStore,
    generator: Generator,
    critic: Critic,
    gen_opt: RmsProp,
    disc_opt: RmsProp,
    rng: ChaCha8Rng,
    critic_updates: usize,
    last_generator_loss: f64,
    epoch: usize,
    last_good: BTreeMap<String, Tensor>,
    curve: Vec<LossRecord>,
}

impl PriorTrainer {
    /// `masks` are 64x64 grids in `[0, 1]`.
    pub fn new(
        masks: &[Array2<f32>],
        gen: &GeneratorSpec,
        disc: &DiscriminatorSpec,
        cfg: &GanTrainConfig,
    ) -> Result<Self> {
        Self::on_device(masks, gen, disc, cfg, &Device::Cpu)
    }

    pub fn on_device(
        masks: &[Array2<f32>],
        gen: &GeneratorSpec,
        disc: &DiscriminatorSpec,
        cfg: &GanTrainConfig,
        device: &Device,
    ) -> Result<Self> {
        cfg.validate()?;
        gen.validate()?;
        disc.validate()?;
        if masks.len() < cfg.batch_size {
            return Err(Error::invalid(format!(
                "shape prior needs at least batch_size = {} masks, got {}",
                cfg.batch_size,
                masks.len()
            )));
        }
        let mut flat = Vec::with_capacity(masks.len() * PRIOR_SIZE * PRIOR_SIZE);
        for (i, m) in masks.iter().enumerate() {
            if m.dim() != (PRIOR_SIZE, PRIOR_SIZE) {
                return Err(Error::ShapeMismatch(format!(
                    "prior mask {i} is {:?}, expected {PRIOR_SIZE}x{PRIOR_SIZE}",
                    m.dim()
                )));
            }
            if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!(
                    "prior mask {i} has values outside [0, 1]"
                )));
            }
            flat.extend(m.iter().copied());
        }
        let masks_t = Tensor::from_vec(flat, (masks.len(), 1, PRIOR_SIZE, PRIOR_SIZE), device)?;

        let seeded = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            rand::RngCore::next_u64(&mut rng)
        };
        let gen_store = ParamStore::new(seeded(1), DType::F32, device);
        let disc_store = ParamStore::new(seeded(2), DType::F32, device);
        let generator = Generator::new(gen, gen_store.var_builder())?;
        let critic = Critic::new(disc, disc_store.var_builder())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3);
        let last_good = disc_store.snapshot()?;
        Ok(Self {
            masks: masks_t,
            n: masks.len(),
            gen_spec: gen.clone(),
            disc_spec: disc.clone(),
            cfg: cfg.clone(),
            gen_store,
            disc_store,
            generator,
            critic,
            gen_opt: RmsProp::new(cfg.learning_rate),
            disc_opt: RmsProp::new(cfg.learning_rate),
            rng,
            critic_updates: 0,
            last_generator_loss: 0.0,
            epoch: 0,
            last_good,
            curve: Vec::new(),
        })
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn curve(&self) -> &[LossRecord] {
        &self.curve
    }

    fn latent(&mut self, b: usize) -> Result<Tensor> {
        let dim = self.gen_spec.latent_dim;
        let z: Vec<f32> = (0..b * dim)
            .map(|_| StandardNormal.sample(&mut self.rng))
            .collect();
        Ok(Tensor::from_vec(z, (b, dim), self.masks.device())?)
    }

    fn generator_step(&mut self) -> Result<f64> {
        let z = self.latent(self.cfg.batch_size)?;
        let fake = self.generator.forward(&z, true)?;
        let loss = generator_loss(&self.critic, &fake)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "generator loss".into(),
                detail: format!("at epoch {}", self.epoch + 1),
            });
        }
        let grads = loss.backward()?;
        self.gen_opt.step(&self.gen_store.trainable(), &grads)?;
        Ok(value)
    }

    /// One pass over the masks. On a non-finite loss the error is returned
    /// and [`PriorTrainer::last_good`] still holds the previous epoch's critic.
    pub fn run_epoch(&mut self) -> Result<LossRecord> {
        let bs = self.cfg.batch_size;
        let mut order: Vec<usize> = (0..self.n).collect();
        order.shuffle(&mut self.rng);
        let (mut c_sum, mut gp_sum, mut g_sum) = (0.0, 0.0, 0.0);
        let (mut c_n, mut g_n) = (0usize, 0usize);
        let disc_params = self.disc_store.trainable();
        for chunk in order.chunks_exact(bs) {
            let idx = Tensor::from_vec(
                chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(),
                bs,
                self.masks.device(),
            )?;
            let real = self.masks.index_select(&idx, 0)?;
            let z = self.latent(bs)?;
            let fake = self.generator.forward(&z, true)?.detach();
            let terms = critic_loss(
                &self.critic,
                &real,
                &fake,
                self.cfg.gp_weight,
                &mut self.rng,
            )
            .map_err(|e| self.annotate(e))?;
            c_sum += terms.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            gp_sum += terms.penalty.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            c_n += 1;
            let grads = terms.loss.backward()?;
            self.disc_opt.step(&disc_params, &grads)?;
            self.critic_updates += 1;
            if self.critic_updates % self.cfg.critic_steps == 0 {
                g_sum += self.generator_step()?;
                g_n += 1;
            }
        }
        let new_snapshot = self.disc_store.snapshot()?;
        if let Some((name, _)) = new_snapshot
            .iter()
            .find(|(_, t)| !all_finite(t).unwrap_or(false))
        {
            return Err(Error::NonFinite {
                what: "critic parameter".into(),
                detail: format!("{name} at epoch {}", self.epoch + 1),
            });
        }
        if g_n > 0 {
            self.last_generator_loss = g_sum / g_n as f64;
        }
        self.epoch += 1;
        self.last_good = new_snapshot;
        let record = LossRecord {
            epoch: self.epoch,
            critic_loss: c_sum / c_n as f64,
            generator_loss: self.last_generator_loss,
            gp_term: gp_sum / c_n as f64,
        };
        self.curve.push(record);
        Ok(record)
    }

    fn annotate(&self, e: Error) -> Error {
        match e {
            Error::NonFinite { what, detail } => Error::NonFinite {
                what,
                detail: format!("{detail} at epoch {}", self.epoch + 1),
            },
            other => other,
        }
    }

    fn meta(&self) -> PriorMeta {
        PriorMeta {
            kind: PRIOR_KIND.into(),
            format_version: PRIOR_FORMAT_VERSION,
            disc: self.disc_spec.clone(),
            gen: self.gen_spec.clone(),
            train: self.cfg.clone(),
            epochs_completed: self.epoch,
        }
    }

    /// The critic as of the last completed epoch.
    pub fn last_good(&self) -> Result<DiscriminatorHandle> {
        DiscriminatorHandle::from_tensors(self.last_good.clone(), self.meta())
    }

    /// Discard the generator and freeze the critic.
    pub fn finish(self) -> Result<PriorTraining> {
        let handle = self.last_good()?;
        Ok(PriorTraining {
            handle,
            curve: self.curve,
        })
    }
}

fn all_finite(t: &Tensor) -> Result<bool> {
    Ok(t.flatten_all()?
        .to_dtype(DType::F32)?
        .to_vec1::<f32>()?
        .iter()
        .all(|v| v.is_finite()))
}

pub struct PriorTraining {
    pub handle: DiscriminatorHandle,
    pub curve: Vec<LossRecord>,
}

/// Run the full schedule and return the frozen critic plus the loss curve.
pub fn train_shape_prior(
    masks: &[Array2<f32>],
    gen: &GeneratorSpec,
    disc: &DiscriminatorSpec,
    cfg: &GanTrainConfig,
) -> Result<PriorTraining> {
    let mut trainer = PriorTrainer::new(masks, gen, disc, cfg)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    trainer.finish()
}

/// Stack 64x64 grids into a `B x 1 x 64 x 64` f32 tensor.
pub fn stack_grids(grids: &[Array2<f32>], device: &Device) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(grids.len() * PRIOR_SIZE * PRIOR_SIZE);
    for g in grids {
        if g.dim() != (PRIOR_SIZE, PRIOR_SIZE) {
            return Err(Error::ShapeMismatch(format!(
                "grid {:?} is not 64x64",
                g.dim()
            )));
        }
        flat.extend(g.iter().copied());
    }
    Ok(Tensor::from_vec(
        flat,
        (grids.len(), 1, PRIOR_SIZE, PRIOR_SIZE),
        device,
    )?)
}
