//! Command-line front end: generate synthetic problems, train, evaluate,
//! mine neighbor structure, and sweep hyperparameter grids, all driven by a
//! single JSON experiment configuration.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gcd_core::config::ExperimentConfig;
use gcd_core::dataset::{gen_gaussian_gcd, load_embeddings, save_embeddings, FileFormat, GcdDataset};
use gcd_core::eval::{gcd_accuracy, predict, GcdMetrics};
use gcd_core::mining::{k_reciprocal, knn};
use gcd_core::model::{classify, forward_single, load_checkpoint, save_checkpoint, ModelParams};
use gcd_core::numeric::{l2_normalize, Mat64};
use gcd_core::rng::Rng;
use gcd_core::trainer::train_with_callback;

#[derive(Parser)]
#[command(name = "gcd", version, about = "Generalized category discovery with contextual losses")]
struct Cli {
    /// Print the full default configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Gen(GenArgs),
    /// Train a model and evaluate it on the unlabeled split.
    Train(TrainArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Emit the k-reciprocal neighbor graph with pseudo-labels as JSONL.
    Mine(MineArgs),
    /// Run a hyperparameter grid and collect metrics into a CSV.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CliFormat {
    Csv,
    Jsonl,
    Bin,
}

impl From<CliFormat> for FileFormat {
    fn from(f: CliFormat) -> FileFormat {
        match f {
            CliFormat::Csv => FileFormat::Csv,
            CliFormat::Jsonl => FileFormat::Jsonl,
            CliFormat::Bin => FileFormat::Bin,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Contextual losses disabled entirely.
    Baseline,
    /// Instance-level context removed.
    NoLn,
    /// Cluster-level context removed.
    NoLc,
    /// Both contextual losses active.
    Full,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration file (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset file format.
    #[arg(long, value_enum, default_value = "csv")]
    format: CliFormat,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Train on an existing dataset file instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Format of --data.
    #[arg(long, value_enum, default_value = "csv")]
    format: CliFormat,
    /// Loss ablation to apply on top of the configuration.
    #[arg(long, value_enum, default_value = "full")]
    ablate: Ablation,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV of `pred,truth` rows to score directly.
    #[arg(long, conflicts_with_all = ["data", "checkpoint"])]
    predictions: Option<PathBuf>,
    /// Old-class ids (comma separated) for --predictions mode.
    #[arg(long, value_delimiter = ',')]
    old: Vec<u32>,
    /// Dataset file to classify with --checkpoint.
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    /// Format of --data.
    #[arg(long, value_enum, default_value = "csv")]
    format: CliFormat,
    /// Model checkpoint to classify --data with.
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Write metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    /// Dataset file to mine.
    #[arg(long)]
    data: PathBuf,
    /// Format of --data.
    #[arg(long, value_enum, default_value = "csv")]
    format: CliFormat,
    /// Optional checkpoint: mine in the learned embedding space with
    /// classifier pseudo-labels.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Neighborhood size.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Write JSONL here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Instance-context weights to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    lambda_n: Vec<f64>,
    /// Cluster-context weights to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    lambda_c: Vec<f64>,
    /// Mining neighborhood sizes to sweep (comma separated).
    #[arg(long, value_delimiter = ',')]
    k_nn: Vec<usize>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GCD_LOG_LEVEL", "warn")).init();
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if cli.print_config {
        println!("{}", ExperimentConfig::default().to_json_pretty()?);
        return Ok(());
    }
    match cli.command {
        Some(Command::Gen(args)) => cmd_gen(args),
        Some(Command::Train(args)) => cmd_train(args),
        Some(Command::Eval(args)) => cmd_eval(args),
        Some(Command::Mine(args)) => cmd_mine(args),
        Some(Command::Sweep(args)) => cmd_sweep(args),
        None => bail!("no subcommand given; see --help"),
    }
}

fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    // The resolved configuration is written beside every run's outputs.
    cfg.save(&dir.join("config.json"))?;
    Ok(dir)
}

fn format_extension(format: CliFormat) -> &'static str {
    match format {
        CliFormat::Csv => "csv",
        CliFormat::Jsonl => "jsonl",
        CliFormat::Bin => "bin",
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let dir = prepare_out_dir(&cfg)?;
    let dataset = gen_gaussian_gcd(&cfg.data, &Rng::new(cfg.seed))?;
    let path = dir.join(format!("dataset.{}", format_extension(args.format)));
    save_embeddings(&dataset, &path, args.format.into())?;
    println!(
        "wrote {} ({} points, {} labeled, {} classes, dim {})",
        path.display(),
        dataset.len(),
        dataset.labeled_indices().len(),
        dataset.k_total,
        dataset.dim()
    );
    Ok(())
}

fn apply_ablation(cfg: &mut ExperimentConfig, ablate: Ablation) {
    match ablate {
        Ablation::Baseline => {
            cfg.loss.lambda_n = 0.0;
            cfg.loss.lambda_c = 0.0;
        }
        Ablation::NoLn => cfg.loss.lambda_n = 0.0,
        Ablation::NoLc => cfg.loss.lambda_c = 0.0,
        Ablation::Full => {}
    }
}

fn evaluate_on_unlabeled(params: &ModelParams, dataset: &GcdDataset) -> Result<GcdMetrics> {
    let unlabeled = dataset.unlabeled_indices();
    let points = dataset.points.select_rows(&unlabeled);
    let truth: Vec<i32> = unlabeled.iter().map(|&i| dataset.true_labels[i]).collect();
    let pred = predict(params, &points)?;
    Ok(gcd_accuracy(&pred, &truth, &dataset.old_classes)?)
}

fn write_metrics(dir: &Path, metrics: &GcdMetrics) -> Result<()> {
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(metrics)? + "\n")?;
    std::fs::write(
        dir.join("metrics.csv"),
        format!("{}\n{}\n", GcdMetrics::CSV_HEADER, metrics.to_csv_row()),
    )?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    apply_ablation(&mut cfg, args.ablate);
    let dir = prepare_out_dir(&cfg)?;

    let dataset = match &args.data {
        Some(path) => load_embeddings(path, args.format.into())
            .with_context(|| format!("loading {}", path.display()))?,
        None => gen_gaussian_gcd(&cfg.data, &Rng::new(cfg.seed))?,
    };
    log::info!(
        "training on {} points ({} labeled, {} classes)",
        dataset.len(),
        dataset.labeled_indices().len(),
        dataset.k_total
    );

    let settings = cfg.settings();
    let cadence = cfg.train.checkpoint_every;
    let dir_for_cb = dir.clone();
    let mut on_epoch = move |epoch: usize, params: &ModelParams| {
        if cadence > 0 && (epoch + 1) % cadence == 0 {
            let path = dir_for_cb.join(format!("checkpoint_epoch{:04}.json", epoch + 1));
            if let Err(e) = save_checkpoint(params, &path) {
                log::warn!("could not write {}: {e}", path.display());
            }
        }
    };
    let outcome = train_with_callback(&dataset, &settings, &mut on_epoch)?;

    save_checkpoint(&outcome.params, &dir.join("checkpoint.json"))?;
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?);
    for record in &outcome.log {
        serde_json::to_writer(&mut log_file, record)?;
        log_file.write_all(b"\n")?;
    }
    log_file.flush()?;

    let metrics = evaluate_on_unlabeled(&outcome.params, &dataset)?;
    write_metrics(&dir, &metrics)?;
    println!(
        "all {:.4} old {:.4} new {:.4} (n_old {}, n_new {}) -> {}",
        metrics.all,
        metrics.old,
        metrics.new,
        metrics.n_old,
        metrics.n_new,
        dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let metrics = if let Some(pred_path) = &args.predictions {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(pred_path)
            .with_context(|| format!("opening {}", pred_path.display()))?;
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (idx, record) in reader.records().enumerate() {
            let record = record?;
            if record.len() < 2 {
                bail!("{}:{}: expected pred,truth", pred_path.display(), idx + 2);
            }
            pred.push(record[0].trim().parse::<usize>().with_context(|| format!("line {}", idx + 2))?);
            truth.push(record[1].trim().parse::<i32>().with_context(|| format!("line {}", idx + 2))?);
        }
        let old: BTreeSet<u32> = args.old.iter().copied().collect();
        gcd_accuracy(&pred, &truth, &old)?
    } else if let (Some(data), Some(ckpt)) = (&args.data, &args.checkpoint) {
        let dataset = load_embeddings(data, args.format.into())
            .with_context(|| format!("loading {}", data.display()))?;
        let params = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        evaluate_on_unlabeled(&params, &dataset)?
    } else {
        bail!("eval needs either --predictions FILE or --data FILE --checkpoint FILE");
    };
    let json = serde_json::to_string_pretty(&metrics)?;
    match &args.out {
        Some(path) => std::fs::write(path, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

/// Pseudo-labels for mining without a trained model: nearest labeled-class
/// mean by cosine similarity.
fn nearest_labeled_mean_labels(dataset: &GcdDataset, embeddings: &Mat64) -> Result<Vec<usize>> {
    let labeled = dataset.labeled_indices();
    if labeled.is_empty() {
        bail!("dataset has no labeled rows; supply --checkpoint for classifier pseudo-labels");
    }
    let mut sums: std::collections::BTreeMap<usize, Vec<f64>> = std::collections::BTreeMap::new();
    for &i in &labeled {
        let class = dataset.true_labels[i] as usize;
        let entry = sums.entry(class).or_insert_with(|| vec![0.0; embeddings.cols()]);
        for (s, &v) in entry.iter_mut().zip(embeddings.row(i)) {
            *s += v;
        }
    }
    let means: Vec<(usize, Vec<f64>)> = sums
        .into_iter()
        .map(|(class, sum)| Ok((class, l2_normalize(&sum)?)))
        .collect::<Result<_>>()?;
    let mut labels = Vec::with_capacity(embeddings.rows());
    for i in 0..embeddings.rows() {
        let row = embeddings.row(i);
        let best = means
            .iter()
            .map(|(class, mean)| {
                let dot: f64 = row.iter().zip(mean).map(|(a, b)| a * b).sum();
                (*class, dot)
            })
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(class, _)| class)
            .unwrap();
        labels.push(best);
    }
    Ok(labels)
}

fn cmd_mine(args: MineArgs) -> Result<()> {
    let dataset = load_embeddings(&args.data, args.format.into())
        .with_context(|| format!("loading {}", args.data.display()))?;
    let (embeddings, pseudo) = match &args.checkpoint {
        Some(ckpt) => {
            let params = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let cache = forward_single(&params, &dataset.points)?;
            let probs = classify(&params, &cache.h, 0.1)?;
            let pseudo: Vec<usize> = (0..probs.rows())
                .map(|i| {
                    probs
                        .row(i)
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                        .map(|(k, _)| k)
                        .unwrap()
                })
                .collect();
            (cache.z, pseudo)
        }
        None => {
            let mut unit = dataset.points.clone();
            for i in 0..unit.rows() {
                let row = l2_normalize(dataset.points.row(i))?;
                unit.row_mut(i).copy_from_slice(&row);
            }
            let pseudo = nearest_labeled_mean_labels(&dataset, &unit)?;
            (unit, pseudo)
        }
    };
    let k = args.k.min(dataset.len().saturating_sub(1)).max(1);
    let reciprocal = k_reciprocal(&knn(&embeddings, k)?);

    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for (i, neighbors) in reciprocal.iter().enumerate() {
        let line = serde_json::json!({
            "i": i,
            "reciprocal": neighbors,
            "pseudo_label": pseudo[i],
        });
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let base = resolve_config(&args.common)?;
    let dir = prepare_out_dir(&base)?;
    let lambda_n = if args.lambda_n.is_empty() { vec![base.loss.lambda_n] } else { args.lambda_n.clone() };
    let lambda_c = if args.lambda_c.is_empty() { vec![base.loss.lambda_c] } else { args.lambda_c.clone() };
    let k_nn = if args.k_nn.is_empty() { vec![base.train.k_nn] } else { args.k_nn.clone() };

    let csv_path = dir.join("sweep.csv");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    writeln!(out, "lambda_n,lambda_c,k_nn,seed,{}", GcdMetrics::CSV_HEADER)?;
    for &ln in &lambda_n {
        for &lc in &lambda_c {
            for &k in &k_nn {
                let mut cfg = base.clone();
                cfg.loss.lambda_n = ln;
                cfg.loss.lambda_c = lc;
                cfg.train.k_nn = k;
                cfg.validate()?;
                let dataset = gen_gaussian_gcd(&cfg.data, &Rng::new(cfg.seed))?;
                let outcome = gcd_core::trainer::train(&dataset, &cfg.settings())?;
                let metrics = evaluate_on_unlabeled(&outcome.params, &dataset)?;
                writeln!(out, "{ln},{lc},{k},{},{}", cfg.seed, metrics.to_csv_row())?;
                log::info!("sweep point lambda_n={ln} lambda_c={lc} k={k}: all {:.4}", metrics.all);
            }
        }
    }
    out.flush()?;
    println!("wrote {}", csv_path.display());
    Ok(())
}
