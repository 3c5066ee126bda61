//! The `priorseg` command line: argument definitions and command bodies.
//!
//! Run directory layout (version [`RUN_LAYOUT_VERSION`]):
//!
//! ```text
//! <output_dir>/run.json              layout version
//! <output_dir>/config.toml           resolved config snapshot
//! <output_dir>/split.json            the partition used
//! <output_dir>/checkpoints/          prior.safetensors, <arm>_latest/_best.safetensors
//! <output_dir>/logs/                 prior_loss.csv, <arm>_iterations.csv, <arm>_epochs.csv, <arm>_events.jsonl
//! <output_dir>/reports/              evaluation reports
//! ```

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::dataio::{
    generate_synthetic, load_dataset, load_image, resize_mask_64, save_dataset, save_mask_png,
    DatasetSplit, ImageRecord, Layout, SyntheticManifest,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, ReportFormat};
use crate::segmodel::SegModel;
use crate::shape_prior::{train_shape_prior, write_loss_csv, DiscriminatorHandle};
use crate::trainer::{write_epoch_csv, write_events_jsonl, write_iteration_csv, Trainer};

pub const RUN_LAYOUT_VERSION: u32 = 1;
/// Set to `1` (or `true`) to pin every thread pool to one thread.
pub const DETERMINISTIC_ENV: &str = "PRIORSEG_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(
    name = "priorseg",
    version,
    about = "Semi-supervised segmentation with a learned shape prior"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic image/mask dataset.
    SynthData(SynthArgs),
    /// Train the shape prior on the labeled masks of the configured split.
    TrainPrior(TrainPriorArgs),
    /// Train the segmentation model.
    TrainSeg(TrainSegArgs),
    /// Score a checkpoint against ground truth.
    Evaluate(EvaluateArgs),
    /// Segment one image.
    Predict(PredictArgs),
}

impl Command {
    /// The subcommand as typed on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData(_) => "synth-data",
            Command::TrainPrior(_) => "train-prior",
            Command::TrainSeg(_) => "train-seg",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 128)]
    pub canvas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainPriorArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override `prior.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Train without the shape-prior term.
    #[arg(long)]
    pub no_dsr: bool,
    /// Supervised loss on the labeled pool only.
    #[arg(long, conflicts_with = "no_dsr")]
    pub labeled_only: bool,
    /// Prior checkpoint; defaults to `<output_dir>/checkpoints/prior.safetensors`.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    /// Continue from a `<arm>_latest.safetensors` checkpoint. The schedule
    /// stored in the checkpoint is kept.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Override `trainer.optim.epochs`.
    #[arg(long, conflicts_with = "resume")]
    pub epochs: Option<usize>,
    /// Override `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Test,
    Val,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Take the dataset and split from this config.
    #[arg(long, conflicts_with = "data")]
    pub config: Option<PathBuf>,
    /// Or evaluate every record under this directory.
    #[arg(long, requires = "layout")]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = parse_layout)]
    pub layout: Option<Layout>,
    /// Which ids of the configured split to score.
    #[arg(long, value_enum, default_value_t = Subset::Test)]
    pub subset: Subset,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
    /// Report path; defaults to `<output_dir>/reports/report.<format>`, or
    /// stdout only when no config is given.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_layout(s: &str) -> std::result::Result<Layout, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Whether the deterministic-mode variable is set to a true value.
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV)
        .map(|v| {
            matches!(
                v.trim().to_ascii_lowercase().as_str(),
                "1" | "true" | "yes" | "on"
            )
        })
        .unwrap_or(false)
}

pub fn run(cli: Cli) -> Result<()> {
    crate::autodiff::enable_higher_order_grads();
    match cli.command {
        Command::SynthData(a) => synth_data(&a),
        Command::TrainPrior(a) => train_prior(&a),
        Command::TrainSeg(a) => train_seg(&a),
        Command::Evaluate(a) => evaluate_cmd(&a),
        Command::Predict(a) => predict(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    let records = generate_synthetic(a.n, a.canvas, a.seed)?;
    let manifest = SyntheticManifest {
        format_version: 1,
        n: a.n,
        canvas: a.canvas,
        seed: a.seed,
        ids: records.iter().map(|r| r.id.clone()).collect(),
    };
    save_dataset(&records, &a.out, Some(&manifest))?;
    eprintln!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

/// A loaded config with its paths resolved.
struct Run {
    cfg: ExperimentConfig,
    base: PathBuf,
    out: PathBuf,
}

impl Run {
    fn open(config: &Path, out: Option<&Path>) -> Result<Self> {
        let cfg = ExperimentConfig::from_file(config)?;
        let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = match out {
            Some(o) => o.to_path_buf(),
            None if cfg.output_dir.is_absolute() => cfg.output_dir.clone(),
            None => base.join(&cfg.output_dir),
        };
        Ok(Self { cfg, base, out })
    }

    fn data(&self) -> Result<(Vec<ImageRecord>, DatasetSplit)> {
        let records = self.cfg.dataset.load(&self.base)?;
        let split = self.cfg.dataset.split(&records, &self.base)?;
        Ok((records, split))
    }

    fn prepare(&self, split: &DatasetSplit) -> Result<()> {
        create_dir(&self.out.join("checkpoints"))?;
        create_dir(&self.out.join("logs"))?;
        write_text(
            &self.out.join("run.json"),
            &format!(
                "{}\n",
                serde_json::json!({ "layout_version": RUN_LAYOUT_VERSION })
            ),
        )?;
        write_text(&self.out.join("config.toml"), &self.cfg.to_toml()?)?;
        write_text(
            &self.out.join("split.json"),
            &(serde_json::to_string_pretty(split)? + "\n"),
        )
    }

    fn prior_path(&self) -> PathBuf {
        self.out.join("checkpoints").join("prior.safetensors")
    }
}

pub fn train_prior(a: &TrainPriorArgs) -> Result<()> {
    let mut run = Run::open(&a.config, a.out.as_deref())?;
    if let Some(e) = a.epochs {
        run.cfg.prior.epochs = e;
    }
    let (records, split) = run.data()?;
    run.prepare(&split)?;
    // Only labeled masks: the prior must not see unlabeled ground truth.
    let masks = records
        .iter()
        .filter(|r| split.labeled_ids.binary_search(&r.id).is_ok())
        .map(|r| r.mask_or_err().map(resize_mask_64))
        .collect::<Result<Vec<_>>>()?;
    eprintln!("training shape prior on {} labeled masks", masks.len());
    let p = &run.cfg.prior;
    let trained = train_shape_prior(&masks, &p.generator, &p.discriminator, &p.gan_config())?;
    let ckpt = run.prior_path();
    trained.handle.save(&ckpt)?;
    write_loss_csv(&run.out.join("logs").join("prior_loss.csv"), &trained.curve)?;
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

pub fn train_seg(a: &TrainSegArgs) -> Result<()> {
    let mut run = Run::open(&a.config, a.out.as_deref())?;
    if let Some(e) = a.epochs {
        run.cfg.trainer.optim.epochs = e;
    }
    let (records, split) = run.data()?;
    run.prepare(&split)?;
    let (arm, split) = if a.labeled_only {
        ("labeled_only", split.labeled_only())
    } else if a.no_dsr {
        ("no_dsr", split)
    } else {
        ("semi", split)
    };
    let dsr = if a.labeled_only || a.no_dsr {
        None
    } else {
        let path = a.prior.clone().unwrap_or_else(|| run.prior_path());
        if !path.is_file() {
            return Err(Error::Config(format!(
                "prior checkpoint {} not found; run train-prior first or pass --no-dsr",
                path.display()
            )));
        }
        Some(DiscriminatorHandle::load(&path, &candle_core::Device::Cpu)?)
    };
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(path, dsr, &records)?,
        None => {
            let model = SegModel::new(&run.cfg.model, run.cfg.trainer.seed)?;
            Trainer::new(model, dsr, &records, &split, run.cfg.trainer.clone())?
        }
    };
    let ckpt_dir = run.out.join("checkpoints");
    let log_dir = run.out.join("logs");
    let latest = ckpt_dir.join(format!("{arm}_latest.safetensors"));
    let best = ckpt_dir.join(format!("{arm}_best.safetensors"));
    while !trainer.is_done() {
        let e = trainer.run_epoch()?;
        trainer.save_best(&best)?;
        trainer.save_checkpoint(&latest)?;
        write_iteration_csv(
            &log_dir.join(format!("{arm}_iterations.csv")),
            trainer.iteration_log(),
        )?;
        write_epoch_csv(
            &log_dir.join(format!("{arm}_epochs.csv")),
            trainer.history(),
        )?;
        write_events_jsonl(
            &log_dir.join(format!("{arm}_events.jsonl")),
            trainer.iteration_log(),
            trainer.history(),
        )?;
        eprintln!(
            "epoch {:>4}  loss {:.4}  val dice {}",
            e.epoch,
            e.l_total,
            e.val_dice
                .map(|d| format!("{d:.2}"))
                .unwrap_or_else(|| "-".into())
        );
    }
    if trainer.history().is_empty() {
        trainer.save_best(&best)?;
        trainer.save_checkpoint(&latest)?;
    }
    eprintln!("wrote {}", best.display());
    Ok(())
}

pub fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let model = SegModel::load(&a.checkpoint, &candle_core::Device::Cpu)?;
    let (records, default_out) = match (&a.config, &a.data) {
        (Some(config), _) => {
            let run = Run::open(config, None)?;
            let (records, split) = run.data()?;
            let ids = match a.subset {
                Subset::Test => split.test_ids,
                Subset::Val => split.val_ids,
                Subset::All => records.iter().map(|r| r.id.clone()).collect(),
            };
            let chosen: Vec<ImageRecord> = records
                .into_iter()
                .filter(|r| ids.contains(&r.id))
                .collect();
            (chosen, Some(run.out.join("reports")))
        }
        (None, Some(dir)) => {
            let layout = a
                .layout
                .ok_or_else(|| Error::Config("--data needs --layout".into()))?;
            (load_dataset(dir, layout)?, None)
        }
        (None, None) => return Err(Error::Config("pass --config or --data".into())),
    };
    if records.is_empty() {
        return Err(Error::invalid("no records to evaluate"));
    }
    let report = evaluate(&model, &records)?;
    print!("{}", report.summary());
    let (format, ext) = match a.format {
        FormatArg::Json => (ReportFormat::Json, "json"),
        FormatArg::Csv => (ReportFormat::Csv, "csv"),
    };
    let path = a
        .out
        .clone()
        .or_else(|| default_out.map(|d| d.join(format!("report.{ext}"))));
    if let Some(p) = path {
        report.write(&p, format)?;
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let model = SegModel::load(&a.checkpoint, &candle_core::Device::Cpu)?;
    let image = load_image(&a.image)?;
    let mask = model.predict(&image)?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            create_dir(dir)?;
        }
    }
    save_mask_png(&mask, &a.out)
}
