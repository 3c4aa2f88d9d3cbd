use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};

use deepsitar::evaluator::{evaluate as evaluate_model, predict_new_individual, FitReport};
use deepsitar::simulator::{simulate as simulate_cohort, DEFAULT_TRUTH_TOML};
use deepsitar::splines::make_basis;
use deepsitar::trainer::{train_autoencoder, train_supervised};
use deepsitar::{
    Architecture, BatchMode, GrowthDataset, SeededRng, SitarDecoder, Split, TrainConfig, TrainHistory,
    TrainedModel, TruthParams,
};

use crate::SeedArg;

/// Bad flag values or inputs that do not fit the model; exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_batch(s: &str) -> Result<BatchMode, String> {
    if s == "full" {
        return Ok(BatchMode::Full);
    }
    match s.parse::<usize>() {
        Ok(size) if size > 0 => Ok(BatchMode::Minibatch { size }),
        _ => Err(format!("expected `full` or a positive batch size, got `{s}`")),
    }
}

/// A positive number or `none`.
#[derive(Debug, Clone, Copy)]
struct OrNone(Option<f64>);

fn parse_optional_positive(s: &str) -> Result<OrNone, String> {
    if s == "none" {
        return Ok(OrNone(None));
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(OrNone(Some(v))),
        _ => Err(format!("expected `none` or a positive number, got `{s}`")),
    }
}

/// Truth parameters and the hash of their config text.
fn load_truth(source: &str) -> Result<(TruthParams, String)> {
    let text = if source == "default" {
        DEFAULT_TRUTH_TOML.to_string()
    } else {
        std::fs::read_to_string(source).with_context(|| format!("cannot read truth config {source}"))?
    };
    let truth = TruthParams::from_toml(&text).with_context(|| format!("invalid truth config {source}"))?;
    Ok((truth, TruthParams::hash_text(&text)))
}

fn read_dataset(path: &Path) -> Result<GrowthDataset> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    GrowthDataset::read_csv(BufReader::new(file)).with_context(|| format!("cannot read dataset {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_dataset(ds: &GrowthDataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    ds.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_history(h: &TrainHistory, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    h.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_report(report: &FitReport, json: &Path, summary: Option<&Path>) -> Result<()> {
    std::fs::write(json, report.to_json()? + "\n").with_context(|| format!("cannot write {}", json.display()))?;
    if let Some(path) = summary {
        let mut out = create(path)?;
        report.write_summary_csv(&mut out)?;
        out.flush()?;
    }
    Ok(())
}

#[derive(Args)]
pub struct SimulateArgs {
    /// Number of individuals.
    #[arg(long)]
    n: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Truth config: `default` or a TOML path.
    #[arg(long, default_value = "default")]
    truth: String,
    /// Fraction of individuals assigned to training.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Dataset file to write.
    #[arg(long)]
    out: PathBuf,
}

pub fn simulate(args: SimulateArgs) -> Result<()> {
    if !(args.split > 0.0 && args.split < 1.0) {
        return Err(usage(format!("--split must lie strictly between 0 and 1, got {}", args.split)));
    }
    let (truth, _) = load_truth(&args.truth)?;
    let ds = simulate_cohort(args.n, &truth, args.split, &mut SeededRng::new(args.seed.seed))?;
    write_dataset(&ds, &args.out)?;
    println!(
        "simulated N={} with {} ages each: {} train, {} validation -> {}",
        ds.len(),
        ds.n_points(),
        ds.split_len(Split::Train),
        ds.split_len(Split::Validation),
        args.out.display()
    );
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Autoencoder,
    Supervised,
}

/// Training flags shared by `train` and `reproduce`.
#[derive(Args, Clone)]
struct TrainingFlags {
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// `full` or a minibatch size.
    #[arg(long, value_parser = parse_batch)]
    batch: Option<BatchMode>,
    /// Epochs at the start with the covariance penalty off.
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    /// Gradient norm cap, or `none`.
    #[arg(long, default_value = "10", value_parser = parse_optional_positive)]
    clip: OrNone,
    /// Train on reconstruction error alone.
    #[arg(long)]
    no_penalty: bool,
    /// Diagonal jitter added to the effect covariance.
    #[arg(long, default_value_t = 1e-6)]
    jitter: f64,
    /// Keep the encoder's raw linear outputs instead of the Jacobian-whitened map.
    #[arg(long)]
    no_precondition: bool,
    /// Ridge for input decorrelation, or `none` for per-age scaling only.
    #[arg(long, default_value = "0.2", value_parser = parse_optional_positive)]
    whitening_ridge: OrNone,
}

impl TrainingFlags {
    fn config(&self, epochs: usize, seed: u64, default_batch: BatchMode) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: self.lr,
            batch_mode: self.batch.unwrap_or(default_batch),
            jitter: self.jitter,
            gradient_clip: self.clip.0,
            penalty_on: !self.no_penalty,
            warmup_epochs: self.warmup,
            seed,
        }
    }

    fn architecture(&self, n_points: usize, n_seg: usize) -> Architecture {
        let mut arch = Architecture::for_inputs(n_points).with_n_seg(n_seg);
        arch.precondition_outputs = !self.no_precondition;
        arch.whitening_ridge = self.whitening_ridge.0;
        arch
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Spline segments.
    #[arg(long, default_value_t = 10)]
    nseg: usize,
    #[arg(long, default_value_t = 22_000)]
    epochs: usize,
    /// Layer widths, e.g. 20,30,30,3; defaults to <ages>,30,30,3.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[command(flatten)]
    seed: SeedArg,
    #[arg(long, value_enum, default_value = "autoencoder")]
    mode: Mode,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// History file; defaults to the model path with extension `history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Truth config the data came from (`default` or a path), recorded by hash.
    #[arg(long)]
    truth: Option<String>,
    #[command(flatten)]
    flags: TrainingFlags,
}

fn fit_model(
    ds: &GrowthDataset,
    arch: Architecture,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<(TrainedModel, TrainHistory)> {
    match mode {
        Mode::Autoencoder => Ok(train_autoencoder(ds, &arch, cfg)?),
        Mode::Supervised => {
            let (sup, history) = train_supervised(ds, &arch.dims, cfg)?;
            let lo = ds.times[0];
            let hi = ds.times[ds.times.len() - 1];
            let basis = make_basis(lo, hi, arch.n_seg, arch.degree, arch.margin)?;
            let rows: Vec<&[f64]> = ds.split(Split::Train).map(|i| i.y.as_slice()).collect();
            let decoder = SitarDecoder::least_squares(basis, &ds.times, &rows)?;
            let architecture = Architecture { precondition_outputs: false, whitening_ridge: None, ..arch };
            let model = TrainedModel {
                encoder: sup.encoder,
                standardizer: sup.standardizer,
                decoder,
                covariance: sup.covariance,
                architecture,
                config: cfg.clone(),
                truth_hash: None,
            };
            Ok((model, history))
        }
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let ds = read_dataset(&args.data)?;
    let mut arch = args.flags.architecture(ds.n_points(), args.nseg);
    if let Some(dims) = args.dims {
        if dims.first() != Some(&ds.n_points()) {
            return Err(usage(format!(
                "--dims must start with the number of ages per individual ({}), got {:?}",
                ds.n_points(),
                dims
            )));
        }
        arch.dims = dims;
    }
    let cfg = args.flags.config(args.epochs, args.seed.seed, BatchMode::Full);
    let (mut model, history) = fit_model(&ds, arch, &cfg, args.mode)?;
    if let Some(source) = &args.truth {
        model.truth_hash = Some(load_truth(source)?.1);
    }
    model.save(&args.out).with_context(|| format!("cannot write {}", args.out.display()))?;
    let history_path = args.history.unwrap_or_else(|| args.out.with_extension("history.csv"));
    write_history(&history, &history_path)?;
    match history.last() {
        Some(last) => println!("epoch {}: train loss {:.6}, validation loss {:.6}", last.epoch, last.train_loss, last.val_loss),
        None => println!("no epochs run; model holds initial parameters"),
    }
    println!("model -> {}", args.out.display());
    println!("history -> {}", history_path.display());
    Ok(())
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional long-format summary table (CSV).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Truth config (`default` or a path) for exact-curve MSE and variance reference.
    #[arg(long)]
    truth: Option<String>,
}

fn load_model(path: &Path) -> Result<TrainedModel> {
    TrainedModel::load(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn print_report(report: &FitReport) {
    for s in &report.splits {
        print!("{}: {} individuals, mean MSE {:.6} (sd {:.6})", s.split, s.individuals, s.mse.mean, s.mse.sd);
        if let Some(e) = &s.exact_mse {
            print!(", exact-curve MSE {:.6}", e.mean);
        }
        println!();
    }
    match &report.variance_recovery {
        Some(v) => println!("variance abs diff (a1, b1, c1): {:?} vs {}", v.abs_diff, v.reference_source),
        None => println!("variance recovery unavailable: dataset has no truth columns"),
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let ds = read_dataset(&args.data)?;
    if ds.n_points() != model.input_dim() {
        return Err(usage(format!(
            "dataset has {} ages per individual; the model expects {}",
            ds.n_points(),
            model.input_dim()
        )));
    }
    let truth = args.truth.as_deref().map(load_truth).transpose()?;
    let report = evaluate_model(&model, &ds, truth.as_ref().map(|t| &t.0))?;
    write_report(&report, &args.out, args.summary.as_deref())?;
    print_report(&report);
    Ok(())
}

#[derive(Args)]
pub struct PredictArgs {
    /// Model file.
    #[arg(long)]
    model: PathBuf,
    /// Measurements in dataset layout (id,age,y; split and truth columns optional).
    #[arg(long)]
    input: PathBuf,
    /// Ages for the fitted curve, comma separated; defaults to the input ages.
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    /// Predictions file (CSV: id,a1,b1,c1,age,fitted).
    #[arg(long)]
    out: PathBuf,
}

pub fn predict(args: PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let ds = read_dataset(&args.input)?;
    if ds.n_points() != model.input_dim() {
        return Err(usage(format!(
            "input has {} measurements per individual; the model expects {}",
            ds.n_points(),
            model.input_dim()
        )));
    }
    let times = args.times.unwrap_or_else(|| ds.times.clone());
    if times.is_empty() || times.iter().any(|t| !t.is_finite()) {
        return Err(usage("--times must list finite ages"));
    }
    let mut w = csv::Writer::from_writer(create(&args.out)?);
    w.write_record(["id", "a1", "b1", "c1", "age", "fitted"])?;
    for ind in &ds.individuals {
        let (u, curve) = predict_new_individual(&model, &ind.y, &times)?;
        let effects = [u.a1.to_string(), u.b1.to_string(), u.c1.to_string()];
        for (t, v) in times.iter().zip(&curve) {
            w.write_record([&ind.id.to_string(), &effects[0], &effects[1], &effects[2], &t.to_string(), &v.to_string()])?;
        }
    }
    w.flush()?;
    println!("predicted {} individuals at {} ages -> {}", ds.len(), times.len(), args.out.display());
    Ok(())
}

#[derive(Args)]
pub struct ReproduceArgs {
    /// Cohort sizes.
    #[arg(long, default_value = "500,1000", value_delimiter = ',')]
    n_values: Vec<usize>,
    /// Spline segment counts.
    #[arg(long, default_value = "5,10,15", value_delimiter = ',')]
    nseg_values: Vec<usize>,
    #[arg(long, default_value_t = 5000)]
    epochs: usize,
    #[command(flatten)]
    seed: SeedArg,
    /// Truth config: `default` or a TOML path.
    #[arg(long, default_value = "default")]
    truth: String,
    /// Fraction of individuals assigned to training.
    #[arg(long, default_value_t = 0.8)]
    split: f64,
    /// Directory for datasets, models, histories, reports and summary.csv.
    #[arg(long)]
    out_dir: PathBuf,
    /// Training flags; the batch size defaults to 32 here.
    #[command(flatten)]
    flags: TrainingFlags,
}

pub fn reproduce(args: ReproduceArgs) -> Result<()> {
    if !(args.split > 0.0 && args.split < 1.0) {
        return Err(usage(format!("--split must lie strictly between 0 and 1, got {}", args.split)));
    }
    let (truth, hash) = load_truth(&args.truth)?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let mut summary: Vec<u8> = Vec::new();
    for &n in &args.n_values {
        let ds = simulate_cohort(n, &truth, args.split, &mut SeededRng::new(args.seed.seed))?;
        write_dataset(&ds, &args.out_dir.join(format!("data_N{n}.csv")))?;
        for &n_seg in &args.nseg_values {
            let stem = format!("N{n}_seg{n_seg}");
            let cfg = args.flags.config(args.epochs, args.seed.seed, BatchMode::Minibatch { size: 32 });
            let arch = args.flags.architecture(ds.n_points(), n_seg);
            let (mut model, history) = fit_model(&ds, arch, &cfg, Mode::Autoencoder)?;
            model.truth_hash = Some(hash.clone());
            model.save(&args.out_dir.join(format!("model_{stem}.json")))?;
            write_history(&history, &args.out_dir.join(format!("history_{stem}.csv")))?;
            let report = evaluate_model(&model, &ds, Some(&truth))?;
            write_report(&report, &args.out_dir.join(format!("report_{stem}.json")), None)?;
            let mut table = Vec::new();
            report.write_summary_csv(&mut table)?;
            let text = String::from_utf8(table).context("summary table is not UTF-8")?;
            let mut lines = text.lines();
            let header = lines.next().unwrap_or_default();
            if summary.is_empty() {
                writeln!(summary, "{header}")?;
            }
            for line in lines {
                writeln!(summary, "{line}")?;
            }
            let train = report.split(Split::Train).map(|s| s.mse.mean).unwrap_or(f64::NAN);
            let val = report.split(Split::Validation).map(|s| s.mse.mean).unwrap_or(f64::NAN);
            println!("N={n} n_seg={n_seg}: train MSE {train:.6}, validation MSE {val:.6}");
        }
    }
    let path = args.out_dir.join("summary.csv");
    std::fs::write(&path, summary).with_context(|| format!("cannot write {}", path.display()))?;
    println!("summary -> {}", path.display());
    Ok(())
}
