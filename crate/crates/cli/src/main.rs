use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use qcnn_core::checkpoint::Checkpoint;
use qcnn_core::config::{Overrides, RunConfig};
use qcnn_core::data::{load_split, FlattenOrder, Split};
use qcnn_core::experiment::{
    data_root, import_dataset, prepare_dataset, run_training, RunOptions, CONFIG_FILE, DATA_DIR_ENV,
};
use qcnn_core::io::write_atomic;
use qcnn_core::model::param_count;
use qcnn_core::plot::write_figures;
use qcnn_core::quantum::{contract_score, ee_report_with, entropy_method_by_name};
use qcnn_core::train::{evaluate, read_metrics_csv, score_stats};
use qcnn_core::verify::{run_verify, Level};

#[derive(Parser)]
#[command(name = "qcnn", version, about = "Product-pooling CNN with tensor network entanglement analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download (or import) and verify a dataset
    Data {
        #[command(flatten)]
        run: RunArgs,
        /// Import IDX files from a local directory instead of downloading
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train a model, logging metrics and entanglement entropy per epoch
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also score the first K test images by tensor contraction
        #[arg(long, default_value_t = 0)]
        contract: usize,
    },
    /// Per-class entanglement entropy of a checkpoint
    Entropy {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "leftright")]
        order: FlattenOrder,
        /// gram | brute-force
        #[arg(long, default_value = "gram")]
        method: String,
        /// Write the report here as well as to stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical self-checks
    Verify {
        #[arg(default_value = "fast")]
        level: Level,
        /// Shift one exported tensor entry by this much (sensitivity check)
        #[arg(long)]
        perturb: Option<f64>,
    },
    /// Render SVG figures from a metrics CSV
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        /// Run config supplying the smoothing window and warmup fraction;
        /// defaults to config.json next to the metrics file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Figure directory; defaults to the metrics file's directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    order: Option<FlattenOrder>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            d: self.d,
            n: self.n,
            epochs: self.epochs,
            seed: self.seed,
            order: self.order,
            dataset: self.dataset.clone(),
            out: self.out.clone(),
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data { run, from } => cmd_data(&run, from.as_deref()),
        Command::Train { run, resume } => cmd_train(&run, resume),
        Command::Eval {
            run,
            checkpoint,
            contract,
        } => cmd_eval(&run, &checkpoint, contract),
        Command::Entropy {
            checkpoint,
            order,
            method,
            out,
        } => cmd_entropy(&checkpoint, order, &method, out.as_deref()),
        Command::Verify { level, perturb } => cmd_verify(level, perturb),
        Command::Plot { metrics, config, out } => cmd_plot(&metrics, config.as_deref(), out.as_deref()),
    }
}

fn cmd_data(args: &RunArgs, from: Option<&Path>) -> Result<()> {
    let cfg = args.resolve()?;
    let root = data_root();
    let source = cfg.source()?;
    let counts = match from {
        Some(dir) => import_dataset(dir, &root, &cfg.dataset, source)?,
        None => prepare_dataset(&root, &cfg.dataset, source)?,
    };
    println!(
        "{}: {} train / {} test images in {}",
        cfg.dataset,
        counts.train,
        counts.test,
        root.join(&cfg.dataset).display()
    );
    Ok(())
}

fn cmd_train(args: &RunArgs, resume: bool) -> Result<()> {
    let cfg = args.resolve()?;
    let model = cfg.model_config()?;
    let out = cfg.out_dir()?;
    println!(
        "q-cnn on {} ({}): N={} L={} channels {:?} basis {} n={}, {} parameters",
        cfg.dataset,
        cfg.order,
        model.n_pixels,
        model.depth(),
        model.channels,
        model.basis,
        model.cutoff,
        param_count(&model)
    );
    println!(
        "{} epochs, batch {}, lr {} (halved every {}), weight decay {}, seed {} -> {}",
        cfg.train.epochs,
        cfg.train.batch_size,
        cfg.train.learning_rate,
        cfg.train.halving_period,
        cfg.train.weight_decay,
        cfg.train.seed,
        out.display()
    );
    let root = data_root();
    let summary = run_training(&cfg, &root, RunOptions { resume }, &mut |line| println!("{line}"))
        .with_context(|| format!("training run in {} (data from {}, override with {DATA_DIR_ENV})", out.display(), root.display()))?;
    println!(
        "final test accuracy {:.4}, best {:.4} at epoch {}",
        summary.final_test_acc, summary.best_test_acc, summary.best_epoch
    );
    Ok(())
}

fn cmd_eval(args: &RunArgs, checkpoint: &Path, contract: usize) -> Result<()> {
    let cfg = args.resolve()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model;
    let side = (model.config.n_pixels as f64).sqrt() as usize;
    if side * side != model.config.n_pixels {
        bail!("checkpoint model has {} pixels, not a square image", model.config.n_pixels);
    }
    let test = load_split(&data_root(), &cfg.dataset, Split::Test, side, cfg.order)?;
    let stats = evaluate(&model, &test)?;
    println!(
        "{} test: accuracy {:.4}, cost {:.6} over {} images (epoch {})",
        cfg.dataset,
        stats.accuracy,
        stats.cost,
        test.len(),
        ckpt.epochs_completed
    );
    if contract > 0 {
        let k = contract.min(test.len());
        let idx: Vec<usize> = (0..k).collect();
        let (pixels, labels) = test.gather(&idx);
        let forward = model.predict(&pixels)?;
        let stack = model.export_augmented_tensors();
        let mut worst: f64 = 0.0;
        let mut rows = Vec::with_capacity(k * forward.cols());
        for b in 0..k {
            let tn = contract_score(&stack, pixels.row(b))?;
            let scale = forward.row(b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = forward.row(b).iter().zip(&tn).fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
            worst = worst.max(diff / scale.max(f64::MIN_POSITIVE));
            rows.extend(tn);
        }
        let tn_scores = qcnn_core::linalg::Matrix::from_vec(k, forward.cols(), rows)?;
        let tn_stats = score_stats(&tn_scores, &labels)?;
        println!(
            "contraction on {k} images: accuracy {:.4}, max relative score difference {worst:.3e}",
            tn_stats.accuracy
        );
    }
    Ok(())
}

fn cmd_entropy(checkpoint: &Path, order: FlattenOrder, method: &str, out: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let method = entropy_method_by_name(method)?;
    let stack = ckpt.model.export_augmented_tensors();
    let report = ee_report_with(method.as_ref(), &stack, order, Some(ckpt.epochs_completed))?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        write_atomic(path, json.as_bytes())?;
    }
    let over: Vec<usize> = (0..report.per_class.len())
        .filter(|&c| report.per_class[c] > report.bound + 1e-12)
        .collect();
    if !over.is_empty() {
        bail!("classes {over:?} exceed the entropy bound {:.6}", report.bound);
    }
    Ok(())
}

fn cmd_verify(level: Level, perturb: Option<f64>) -> Result<()> {
    let report = run_verify(level, perturb);
    for check in &report.checks {
        println!("{check}");
    }
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", report.checks.len());
    }
    println!("all {} checks passed", report.checks.len());
    Ok(())
}

fn cmd_plot(metrics: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let run_dir = metrics.parent().unwrap_or(Path::new("."));
    let cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None if run_dir.join(CONFIG_FILE).is_file() => RunConfig::load(&run_dir.join(CONFIG_FILE))?,
        None => RunConfig::default(),
    };
    let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
    let records = read_metrics_csv(&text)?;
    let out_dir = out.unwrap_or(run_dir);
    let report = write_figures(&records, out_dir, cfg.train.ee_window, cfg.train.warmup_fraction)?;
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    match report.pearson_r {
        Some(r) => println!(
            "Pearson r(EE, train cost) = {r:.4} over {} post-warmup epochs",
            report.correlation_points
        ),
        None => println!(
            "Pearson r(EE, train cost) undefined ({} post-warmup epochs with EE)",
            report.correlation_points
        ),
    }
    Ok(())
}
