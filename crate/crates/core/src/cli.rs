//! Command-line interface.
//!
//! Standard output carries machine-readable records, notes go to standard
//! error. Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backward::fd_check;
use crate::baselines::{quantize_with, MethodId};
use crate::format::{self, read_quantized, read_tensor, write_quantized, write_tensor};
use crate::metrics::{distribution_report, relative_mse_detail, DEFAULT_BINS};
use crate::quantizer::{quantize_filter, LevelSet, QuantConfig};
use crate::record::Record;
use crate::tensor::{QuantizedLayer, WeightTensor};
use crate::train::{run_experiment, DatasetKind, TrainConfig, TrainMethod, Trainer, TrainingLog};

#[derive(Debug, Parser)]
#[command(name = "wnq", version, about = "Per-filter low-bit weight quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a WNQT tensor (writes WNQQ, or WNQT for dorefa).
    Quantize(QuantizeArgs),
    /// Expand a WNQQ file back into a WNQT tensor.
    Dequantize(DequantizeArgs),
    /// Distribution report for a tensor, optionally against its quantization.
    Stats(StatsArgs),
    /// Randomized finite-difference check of the max-abs backward rule.
    GradCheck(GradCheckArgs),
    /// Train the tiny network once.
    DemoTrain(DemoTrainArgs),
    /// Paired wnq vs lqnet runs over several seeds.
    Compare(CompareArgs),
}

fn parse_method(s: &str) -> Result<MethodId, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_train_method(s: &str) -> Result<TrainMethod, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_width(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("bad hidden width {s:?}")),
        Ok(v) => Ok(v),
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=8))]
    pub bits: u8,
    /// wnq, lqnet, residual or dorefa.
    #[arg(long, default_value = "wnq", value_parser = parse_method)]
    pub method: MethodId,
    /// Alternating iterations per filter.
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
    pub iters: u32,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct DequantizeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// WNQT file whose shape the output takes (WNQQ keeps only N and M).
    #[arg(long)]
    pub like: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// WNQQ or WNQT file holding the quantized weights.
    #[arg(long)]
    pub quantized: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BINS, value_parser = clap::value_parser!(u32).range(1..).map(|v| v as usize))]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Filter length.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..).map(|v| v as usize))]
    pub m: usize,
    /// Bit width of the forward quantization that produces the context.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=8))]
    pub k: u8,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..).map(|v| v as usize))]
    pub seeds: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Largest accepted deviation.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=8))]
    pub bits: u8,
    /// Steps with the quantized method.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Full-precision steps before quantized fine-tuning (0 trains from scratch).
    #[arg(long, default_value_t = 2000)]
    pub pretrain_steps: usize,
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub pretrain_lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// blobs or spirals.
    #[arg(long, default_value = "blobs", value_parser = parse_dataset)]
    pub dataset: DatasetKind,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    /// Comma-separated hidden widths.
    #[arg(long, default_value = "32,32", value_delimiter = ',', value_parser = parse_width)]
    pub hidden: Vec<usize>,
    /// Use the small conv network on rendered inputs.
    #[arg(long)]
    pub conv: bool,
    #[arg(long, default_value_t = 0)]
    pub report_every: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

impl TrainArgs {
    fn config(&self, method: TrainMethod, seed: u64) -> TrainConfig {
        TrainConfig {
            method,
            bits: self.bits as usize,
            lr: self.lr,
            momentum: self.momentum,
            steps: self.steps,
            batch: self.batch,
            seed,
            dataset: self.dataset,
            samples: self.samples,
            hidden: self.hidden.clone(),
            conv: self.conv,
            pretrain_steps: self.pretrain_steps,
            pretrain_lr: self.pretrain_lr,
            report_every: self.report_every,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct DemoTrainArgs {
    /// fp, wnq, lqnet, residual or dorefa.
    #[arg(long, default_value = "wnq", value_parser = parse_train_method)]
    pub method: TrainMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Runs use seeds 0..seeds.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..).map(|v| v as u64))]
    pub seeds: u64,
    #[command(flatten)]
    pub train: TrainArgs,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let mut out = std::io::stdout().lock();
    match execute(cli.command, &mut out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Runs a parsed command, writing records to `out`.
pub fn execute(command: Command, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    match command {
        Command::Quantize(a) => cmd_quantize(&a, out),
        Command::Dequantize(a) => cmd_dequantize(&a, out),
        Command::Stats(a) => cmd_stats(&a, out),
        Command::GradCheck(a) => cmd_gradcheck(&a, out),
        Command::DemoTrain(a) => cmd_demo_train(&a, out),
        Command::Compare(a) => cmd_compare(&a, out),
    }
}

fn load_tensor(path: &Path) -> anyhow::Result<WeightTensor> {
    read_tensor(path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_quantize(a: &QuantizeArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let input = load_tensor(&a.input)?;
    let config = QuantConfig {
        bits: a.bits as usize,
        init_iters: a.iters as usize,
        train_iters: 1,
        tol: a.tol,
    };
    config.validate()?;
    let mut values = Vec::with_capacity(input.len());
    let mut filters = Vec::with_capacity(input.filter_count());
    let mut negative = 0usize;
    for view in input.filter_views() {
        let q = quantize_with(a.method, view.values, &config, None)?;
        values.extend_from_slice(&q.values);
        if let Some(fq) = q.quantization {
            negative += usize::from(fq.negative_alpha);
            filters.push(fq.filter);
        }
    }
    let quantized = input.with_data(values)?;
    if a.method.has_levels() {
        let layer = QuantizedLayer::new(input.kind(), filters)?;
        write_quantized(&layer, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    } else {
        write_tensor(&quantized, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    }
    if negative > 0 {
        eprintln!("note: {negative} filters ended with a negative level parameter");
    }
    let mse = relative_mse_detail(&input, &quantized)?;
    let rec = Record::new("quantize")
        .field("method", a.method)
        .field("bits", a.bits)
        .field("filters", input.filter_count())
        .field("m", input.filter_len())
        .opt("relative_mse", mse.mean)
        .field("zero_filters", mse.zero_filters)
        .field("negative_alpha", negative);
    writeln!(out, "{rec}")?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_dequantize(a: &DequantizeArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let layer = read_quantized(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let like = a.like.as_deref().map(load_tensor).transpose()?;
    let tensor = layer.dequantize(like.as_ref().map(|t| t.shape()))?;
    write_tensor(&tensor, &a.output).with_context(|| format!("writing {}", a.output.display()))?;
    let shape: Vec<usize> = tensor.shape().to_vec();
    writeln!(
        out,
        "{}",
        Record::new("dequantize")
            .field("kind_of_layer", tensor.kind())
            .list("shape", &shape)
            .field("bits", layer.bits())
    )?;
    Ok(ExitCode::SUCCESS)
}

enum QuantizedInput {
    Levels(QuantizedLayer),
    Dense(WeightTensor),
}

fn load_quantized_any(path: &Path) -> anyhow::Result<QuantizedInput> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(&format::QUANT_MAGIC) {
        Ok(QuantizedInput::Levels(format::decode_quantized(&bytes)?))
    } else {
        Ok(QuantizedInput::Dense(
            format::decode_tensor(&bytes).with_context(|| format!("decoding {}", path.display()))?,
        ))
    }
}

fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let input = load_tensor(&a.input)?;
    let name = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut report = match &a.quantized {
        None => distribution_report(&input, None, None, a.bins)?,
        Some(path) => match load_quantized_any(path)? {
            QuantizedInput::Levels(layer) => {
                let q = layer.dequantize(Some(input.shape()))?;
                let levels = layer
                    .filters
                    .iter()
                    .map(|f| {
                        LevelSet::new(f.alpha())
                            .levels()
                            .iter()
                            .map(|l| f.mav() * l.value)
                            .collect()
                    })
                    .collect();
                distribution_report(&input, None, Some(layer.bits()), a.bins)?
                    .with_quantized(&input, &q)?
                    .with_levels(levels)
            }
            QuantizedInput::Dense(q) => distribution_report(&input, None, None, a.bins)?.with_quantized(&input, &q)?,
        },
    };
    report.name = name;
    writeln!(out, "{}", report.to_record(None))?;
    Ok(ExitCode::SUCCESS)
}

/// Random filter whose max-abs element clears every other magnitude by more
/// than `10 * eps`.
fn gradcheck_vector(m: usize, eps: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let upstream: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    let top = rng.random_range(0..m);
    let runner_up = w
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max);
    let magnitude = runner_up + 0.05 + 20.0 * eps;
    w[top] = if rng.random_bool(0.5) { magnitude } else { -magnitude };
    (w, upstream)
}

fn cmd_gradcheck(a: &GradCheckArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    if !(a.eps > 0.0) {
        bail!("--eps must be positive");
    }
    let config = QuantConfig::with_bits(a.k as usize);
    let mut failures = 0usize;
    let mut worst = 0.0f64;
    for seed in 0..a.seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, upstream) = gradcheck_vector(a.m, a.eps, &mut rng);
        let q = quantize_filter(&w, &config, None)?;
        let report = fd_check(&w, &upstream, a.eps)?;
        debug_assert_eq!(q.context.max_index, crate::quantizer::max_abs(&w).0);
        worst = worst.max(report.max_deviation);
        if !(report.max_deviation < a.tol) {
            failures += 1;
            writeln!(
                out,
                "{}",
                Record::new("gradcheck_failure")
                    .field("seed", seed)
                    .field("index", report.worst_index)
                    .field("max_index", q.context.max_index)
                    .field("analytic", report.analytic[report.worst_index])
                    .field("numeric", report.numeric[report.worst_index])
                    .field("deviation", report.max_deviation)
            )?;
        }
    }
    writeln!(
        out,
        "{}",
        Record::new("gradcheck")
            .field("m", a.m)
            .field("k", a.k)
            .field("seeds", a.seeds)
            .field("eps", a.eps)
            .field("max_deviation", worst)
            .field("failures", failures)
    )?;
    Ok(if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn write_run_artifacts(dir: &Path, prefix: &str, log: &TrainingLog, trainer: &Trainer) -> anyhow::Result<()> {
    fs::write(dir.join(format!("{prefix}log.txt")), log.render())?;
    let qw = trainer.quantize()?;
    let method = trainer.config().method.method();
    for (p, (name, master)) in trainer.master_tensors().into_iter().enumerate() {
        write_tensor(&master, dir.join(format!("{prefix}{name}.wnqt")))?;
        match method {
            Some(m) if m.has_levels() => {
                let filters = qw.packed[p]
                    .iter()
                    .map(|f| f.clone().expect("method has levels"))
                    .collect();
                let layer = QuantizedLayer::new(master.kind(), filters)?;
                write_quantized(&layer, dir.join(format!("{prefix}{name}.wnqq")))?;
            }
            Some(_) => {
                let q = master.with_data(qw.weights[p].clone())?;
                write_tensor(&q, dir.join(format!("{prefix}{name}.q.wnqt")))?;
            }
            None => {}
        }
    }
    Ok(())
}

fn cmd_demo_train(a: &DemoTrainArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let config = a.train.config(a.method, a.seed);
    config.validate()?;
    fs::create_dir_all(&a.train.out_dir).with_context(|| format!("creating {}", a.train.out_dir.display()))?;
    eprintln!("training {} for {} steps (seed {})", a.method, config.steps, a.seed);
    let (log, trainer) = run_experiment(&config)?;
    write_run_artifacts(&a.train.out_dir, "", &log, &trainer)?;
    writeln!(out, "{}", log.records.last().expect("final record"))?;
    Ok(ExitCode::SUCCESS)
}

/// One row of the paired comparison table.
pub fn summary_record(method: TrainMethod, seed: u64, log: &TrainingLog) -> Record {
    let names: Vec<&str> = log.final_reports.iter().map(|r| r.name.as_str()).collect();
    let mse: Vec<String> = log
        .final_reports
        .iter()
        .map(|r| r.relative_mse.map_or("na".into(), |v| v.to_string()))
        .collect();
    let tails: Vec<String> = log
        .final_reports
        .iter()
        .map(|r| r.tail_ratio.map_or("na".into(), |v| v.to_string()))
        .collect();
    Record::new("summary")
        .field("method", method)
        .field("seed", seed)
        .field("accuracy", log.final_stats.accuracy)
        .list("layers", &names)
        .list("relative_mse", &mse)
        .list("tail_ratio", &tails)
}

fn cmd_compare(a: &CompareArgs, out: &mut dyn Write) -> anyhow::Result<ExitCode> {
    let methods = [TrainMethod::Quant(MethodId::Wnq), TrainMethod::Quant(MethodId::LqNet)];
    let jobs: Vec<TrainConfig> = methods
        .iter()
        .flat_map(|&m| (0..a.seeds).map(move |s| (m, s)))
        .map(|(m, s)| a.train.config(m, s))
        .collect();
    if let Some(c) = jobs.first() {
        c.validate()?;
    }
    fs::create_dir_all(&a.train.out_dir).with_context(|| format!("creating {}", a.train.out_dir.display()))?;
    eprintln!("running {} independent runs", jobs.len());
    // Runs are independent and each is single-threaded, so results do not
    // depend on scheduling.
    let results: Vec<crate::Result<(TrainingLog, Trainer)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|cfg| scope.spawn(move || run_experiment(cfg)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    let mut table = String::new();
    for (cfg, res) in jobs.iter().zip(results) {
        let (log, trainer) = res?;
        let prefix = format!("{}_seed{}_", cfg.method, cfg.seed);
        write_run_artifacts(&a.train.out_dir, &prefix, &log, &trainer)?;
        let row = summary_record(cfg.method, cfg.seed, &log);
        table.push_str(&row.to_string());
        table.push('\n');
    }
    fs::write(a.train.out_dir.join("summary.txt"), &table)?;
    out.write_all(table.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}
