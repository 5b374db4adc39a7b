use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lesionseg::checkpoint::Checkpoint;
use lesionseg::config::{DataSource, TrainConfig};
use lesionseg::fusion::FusionMode;
use lesionseg::model::Preset;
use lesionseg::train::{self, EpochLog, Trainer};
use lesionseg::{selftest, Result};

#[derive(Parser)]
#[command(
    name = "lesionseg",
    version,
    about = "Skin lesion segmentation: train, evaluate, infer, self-check"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset and write metrics.csv / metrics.json.
    Eval(EvalArgs),
    /// Write mask and overlay PNGs for one or more images.
    Infer(InferArgs),
    /// Run gradient checks, oracle comparisons and shape audits.
    Selftest(SelftestArgs),
}

/// Config file plus targeted overrides, shared by every subcommand.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model/training preset: toy or large.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// concat-res | concat-res-spatial | concat-res-channel | full
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
    /// Any config key, as `key=value`; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    /// Applies the config file (or `base` when none is given) and then the
    /// override flags.
    fn resolve(&self, base: &str) -> Result<TrainConfig> {
        let mut text = match &self.config {
            Some(path) => std::fs::read_to_string(path).map_err(|e| {
                lesionseg::Error::Config(format!("cannot read config {}: {e}", path.display()))
            })?,
            None => base.to_string(),
        };
        // a --preset flag wins over a preset line in the file
        if let Some(p) = self.preset {
            text = text
                .lines()
                .filter(|l| l.split('=').next().map(str::trim) != Some("preset"))
                .collect::<Vec<_>>()
                .join("\n");
            text = format!("preset = {p}\n{text}");
        }
        let mut lines = vec![text];
        if let Some(s) = self.seed {
            lines.push(format!("seed = {s}"));
        }
        if let Some(e) = self.epochs {
            lines.push(format!("epochs = {e}"));
        }
        if let Some(m) = self.fusion_mode {
            lines.push(format!("fusion_mode = {m}"));
        }
        for kv in &self.sets {
            if !kv.contains('=') {
                return Err(lesionseg::Error::Config(format!(
                    "--set expects key=value, got {kv:?}"
                )));
            }
            lines.push(kv.clone());
        }
        TrainConfig::parse(&lines.join("\n"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Where to write the checkpoint (each epoch and at the end).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write the per-epoch log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DataArgs {
    /// Use n synthetic samples.
    #[arg(long, conflicts_with_all = ["images", "manifest"])]
    synthetic: Option<usize>,
    /// Image directory (ISIC layout); requires --masks.
    #[arg(long, requires = "masks")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    masks: Option<PathBuf>,
    /// JSON manifest: a list of `{"image", "mask", "id"}` objects.
    #[arg(long, conflicts_with = "images")]
    manifest: Option<PathBuf>,
}

impl DataArgs {
    fn source(&self) -> Option<DataSource> {
        if let Some(n) = self.synthetic {
            Some(DataSource::Synthetic { n })
        } else if let (Some(images), Some(masks)) = (&self.images, &self.masks) {
            Some(DataSource::Isic {
                images: images.clone(),
                masks: masks.clone(),
            })
        } else {
            self.manifest.clone().map(DataSource::Manifest)
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for metrics.csv and metrics.json.
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "infer_out")]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.cfg.resolve("")?;
    if args.checkpoint.is_some() {
        cfg.checkpoint = args.checkpoint.clone();
    }
    let mut log_file = match &args.log {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            Some(File::create(path)?)
        }
        None => None,
    };
    if let Some(f) = &mut log_file {
        writeln!(f, "{}", EpochLog::HEADER)?;
    }
    let mut trainer = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let (train, val) = train::load_data(&cfg)?;
            let t = Trainer::resume(cfg, &ck, train, val)?;
            eprintln!(
                "resumed from {} at epoch {} (step {})",
                path.display(),
                t.epoch,
                t.step
            );
            t
        }
        None => Trainer::new(cfg)?,
    };
    eprintln!(
        "{} parameters, {} training / {} validation samples",
        trainer.ps.num_scalars(),
        trainer.train_set.len(),
        trainer.val_set.len()
    );
    println!("{}", EpochLog::HEADER);
    let mut write_err = None;
    trainer.run(|log| {
        println!("{log}");
        if let Some(f) = &mut log_file {
            if let Err(e) = writeln!(f, "{log}") {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    match &trainer.cfg.checkpoint {
        Some(path) => eprintln!("checkpoint written to {}", path.display()),
        None => eprintln!("no checkpoint path configured; weights were not saved"),
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (_, model, ps) = train::load_model(&ck)?;
    let mut cfg = args.cfg.resolve(&ck.config_text)?;
    cfg.model = model.config.clone();
    if let Some(src) = args.data.source() {
        cfg.data = src;
    }
    let threshold = args.threshold.unwrap_or(cfg.threshold);
    let samples = train::load_dataset(&cfg)?;
    let report = train::evaluate(&model, &ps, &samples, threshold)?;
    report.save(&args.out)?;
    let a = &report.aggregate;
    println!(
        "{} samples: jaccard {:.4} dice {:.4} accuracy {:.4} sensitivity {:.4} specificity {:.4} mcc {:.4}",
        report.samples.len(),
        a.jaccard,
        a.f_measure,
        a.accuracy,
        a.sensitivity,
        a.specificity,
        a.mcc
    );
    eprintln!("metrics written to {}", args.out.display());
    Ok(())
}

fn run_infer(args: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let (_, model, ps) = train::load_model(&ck)?;
    let cfg = args.cfg.resolve(&ck.config_text)?;
    let threshold = args.threshold.unwrap_or(cfg.threshold);
    for image in &args.images {
        let out = train::infer(&model, &ps, image, &args.out, threshold)?;
        println!(
            "{}: mask {} overlay {} ({:.1}% foreground)",
            image.display(),
            out.mask.display(),
            out.overlay.display(),
            100.0 * out.foreground_fraction
        );
    }
    Ok(())
}

fn run_selftest(args: SelftestArgs) -> Result<bool> {
    let seed = args.cfg.seed.unwrap_or(0);
    let results = selftest::run_all(seed, |r| println!("{r}"))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    Ok(failed == 0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => run_train(a).map(|()| true),
        Command::Eval(a) => run_eval(a).map(|()| true),
        Command::Infer(a) => run_infer(a).map(|()| true),
        Command::Selftest(a) => run_selftest(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
