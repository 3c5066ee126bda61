//! Experiment configuration: one TOML file with `dataset`, `prior`, `model`
//! and `trainer` sections. Every key has a default; unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{
    load_dataset, load_id_list, make_partition_with_holdout, DatasetSplit, Fraction, Holdout,
    ImageRecord, Layout,
};
use crate::error::{Error, Result};
use crate::segmodel::SegModelSpec;
use crate::shape_prior::{DiscriminatorSpec, GanTrainConfig, GeneratorSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub layout: Layout,
    pub root: PathBuf,
    pub fraction: Fraction,
    /// Seed of the partition shuffle.
    pub seed: u64,
    pub val_count: usize,
    pub test_count: usize,
    /// Files listing validation/test ids, one per line. When given they
    /// replace the seeded selection (both must be set).
    pub val_ids: Option<PathBuf>,
    pub test_ids: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            layout: Layout::Synthetic,
            root: PathBuf::from("data/synthetic"),
            fraction: Fraction::Eighth,
            seed: 0,
            val_count: 20,
            test_count: 40,
            val_ids: None,
            test_ids: None,
        }
    }
}

impl DatasetSection {
    /// Relative paths are taken relative to `base`.
    fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    pub fn load(&self, base: &Path) -> Result<Vec<ImageRecord>> {
        load_dataset(&self.resolve(base, &self.root), self.layout)
    }

    pub fn split(&self, records: &[ImageRecord], base: &Path) -> Result<DatasetSplit> {
        let holdout = match (&self.val_ids, &self.test_ids) {
            (Some(v), Some(t)) => Holdout::Ids {
                val: load_id_list(&self.resolve(base, v))?,
                test: load_id_list(&self.resolve(base, t))?,
            },
            (None, None) => Holdout::Counts {
                val: self.val_count,
                test: self.test_count,
            },
            _ => {
                return Err(Error::Config(
                    "val_ids and test_ids must be given together".into(),
                ))
            }
        };
        make_partition_with_holdout(records, self.fraction, &holdout, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gp_weight: f64,
    pub critic_steps: usize,
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
}

impl Default for PriorSection {
    fn default() -> Self {
        let g = GanTrainConfig::default();
        Self {
            learning_rate: g.learning_rate,
            batch_size: g.batch_size,
            epochs: g.epochs,
            gp_weight: g.gp_weight,
            critic_steps: g.critic_steps,
            seed: g.seed,
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
        }
    }
}

impl PriorSection {
    pub fn gan_config(&self) -> GanTrainConfig {
        GanTrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            gp_weight: self.gp_weight,
            critic_steps: self.critic_steps,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of everything a run writes; relative to the config file.
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub prior: PriorSection,
    pub model: SegModelSpec,
    pub trainer: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/experiment"),
            dataset: DatasetSection::default(),
            prior: PriorSection::default(),
            model: SegModelSpec::default(),
            trainer: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.gan_config().validate()?;
        self.prior.generator.validate()?;
        self.prior.discriminator.validate()?;
        self.model.validate()?;
        self.trainer.validate()?;
        if self.trainer.augmentation.crop_to != self.model.input_size {
            return Err(Error::Config(format!(
                "trainer.augmentation.crop_to ({}) must equal model.input_size ({})",
                self.trainer.augmentation.crop_to, self.model.input_size
            )));
        }
        Ok(())
    }
}
