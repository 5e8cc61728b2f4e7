use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use orthomap::detector::{load_model, HeadKind};
use orthomap::evalkit::export_features;
use orthomap::experiment::{run_ab_study, run_evaluation, run_training, ExperimentConfig};
use orthomap::ortho::build_orthogonal_basis;
use orthomap::synthgen::{read_dataset, write_dataset, Dataset, GenConfig};
use orthomap::{Error, Result};

/// Synthetic fine-grained detection experiments with frozen orthogonal
/// class prototypes.
#[derive(Parser)]
#[command(name = "orthomap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenData),
    /// Train one detector.
    Train(Train),
    /// Evaluate a trained model and write metrics.json and confusion.csv.
    Eval(Eval),
    /// Train and evaluate both heads for several seeds.
    AbStudy(AbStudy),
    /// Write a frozen prototype basis as JSON.
    ExportBasis(ExportBasis),
    /// Write the features of every positive location as CSV.
    ExportFeatures(ExportFeatures),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment file (TOML); defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p),
            None => Ok(ExperimentConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 800)]
    scenes: usize,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Dataset directory; by default the training split of the config is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: PathBuf,
    /// Dataset directory; by default the test split of the config is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AbStudy {
    #[command(flatten)]
    config: ConfigArg,
    /// Comma-separated seeds, overriding `study.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportBasis {
    /// Take the basis from a trained om model.
    #[arg(long, conflicts_with_all = ["seed", "classes", "dim"])]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 9)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    ksize: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportFeatures {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::NonFinite(_) | Error::Degenerate { .. } => 4,
    }
}

fn dataset_or(data: &Option<PathBuf>, fallback: impl FnOnce() -> Result<Dataset>) -> Result<Dataset> {
    match data {
        Some(dir) => read_dataset(dir),
        None => fallback(),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let base = a.config.load()?;
    let config = GenConfig {
        classes: a.classes.unwrap_or(base.data.generator.classes),
        delta: a.delta.unwrap_or(base.data.generator.delta),
        ..base.data.generator
    };
    config.validate()?;
    let ds = Dataset::generate(a.seed, a.scenes, &config)?;
    let manifest = write_dataset(&ds, &a.out)?;
    println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serialises"));
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(h) = a.head {
        cfg.detector.head = h;
    }
    if let Some(s) = a.seed {
        cfg.detector.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.detector.optim.epochs = e;
    }
    cfg.validate()?;
    let data = dataset_or(&a.data, || cfg.data.train_set())?;
    cfg.detector.validate(data.config.classes, data.config.image_size)?;
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    let (_, log) = run_training(&cfg, &data, Some(&out), |r| {
        eprintln!(
            "epoch {:>3}  cls {:.4}  reg {:.4}  ctr {:.4}  aux {:.4}  lr {:.5}",
            r.epoch, r.loss_cls, r.loss_reg, r.loss_ctr, r.loss_aux, r.lr
        )
    })?;
    if let Some(r) = log.last() {
        println!(
            "final losses: cls {:.6} reg {:.6} ctr {:.6} aux {:.6}",
            r.loss_cls, r.loss_reg, r.loss_ctr, r.loss_aux
        );
    }
    println!("model written to {}", out.join("model.bin").display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let model = load_model(&a.model)?;
    let mut cfg = a.config.load()?;
    cfg.detector = model.config().clone();
    let data = dataset_or(&a.data, || cfg.data.test_set())?;
    let ev = run_evaluation(&cfg, &model, &data, Some(&a.out))?;
    cfg.write_resolved(&a.out)?;
    for w in &ev.report.warnings {
        eprintln!("warning: {w}");
    }
    println!("mAP@0.5 {:.6}", ev.report.map);
    Ok(())
}

fn ab_study(a: AbStudy) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(s) = a.seeds {
        cfg.study.seeds = s;
    }
    if let Some(e) = a.epochs {
        cfg.detector.optim.epochs = e;
    }
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    let summary = run_ab_study(&cfg, Some(&out), |run| {
        eprintln!(
            "seed {} {:<6} mAP {:.4}",
            run.seed,
            run.head.name(),
            run.evaluation.report.map
        )
    })?;
    println!("{}", serde_json::to_string_pretty(&summary.means).expect("summary serialises"));
    Ok(())
}

fn export_basis(a: ExportBasis) -> Result<()> {
    let basis = match &a.model {
        Some(p) => {
            let m = load_model(p)?;
            m.basis()
                .cloned()
                .ok_or_else(|| Error::Config(format!("{} has a {} head without a basis", p.display(), m.config().head.name())))?
        }
        None => build_orthogonal_basis(a.seed, a.classes, a.dim, a.ksize)
            .map_err(|e| match e {
                Error::Contract(msg) => Error::Config(msg),
                other => other,
            })?,
    };
    basis.export_json(&a.out)?;
    println!("basis {}x{} written to {}", basis.classes(), basis.dim(), a.out.display());
    Ok(())
}

fn export(a: ExportFeatures) -> Result<()> {
    let model = load_model(&a.model)?;
    let cfg = a.config.load()?;
    let data = dataset_or(&a.data, || cfg.data.test_set())?;
    let rows = export_features(&model, &data, &a.out)?;
    println!("{rows} rows written to {}", a.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::AbStudy(a) => ab_study(a),
        Command::ExportBasis(a) => export_basis(a),
        Command::ExportFeatures(a) => export(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
