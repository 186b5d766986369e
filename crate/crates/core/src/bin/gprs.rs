use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gprs::gp::{AdamConfig, EngineConfig, GpEngine};
use gprs::harness::{self, BenchRecord, BenchSettings, Experiment, PlotKind, TilesSchedule};
use gprs::simulator::{self, MsdConfig};
use gprs::task_runtime::write_trace;
use gprs::{BackendId, Dataset, Error, Hyperparameters};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "gprs", version, about = "Task-parallel exact Gaussian process regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the mass-spring-damper system and write a dataset file.
    Generate(GenerateArgs),
    /// Time one pipeline over a list of worker counts.
    StrongScaling(StrongArgs),
    /// Time one pipeline over a list of problem sizes.
    SizeScaling(SizeArgs),
    /// Predict test targets from a training set.
    Predict(PredictArgs),
    /// Fit hyperparameters with Adam.
    Optimize(OptimizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Reference,
    System,
}

impl From<Backend> for BackendId {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Reference => BackendId::Reference,
            Backend::System => BackendId::System,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Opt,
    PredFull,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::Opt => Experiment::Opt,
            ExperimentArg::PredFull => Experiment::PredFull,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Tile BLAS backend [default: system when built with it, else reference]
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    /// Seed for generated data
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Write a task trace to this path
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl Common {
    fn backend(&self) -> BackendId {
        self.backend.map_or_else(BackendId::preferred, Into::into)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value = "pred-full")]
    experiment: ExperimentArg,
    /// Timed repetitions per configuration
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    /// Adam iterations per repetition of the optimization benchmark
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    opt_iters: u64,
    /// Skip the untimed warm-up run
    #[arg(long)]
    no_warmup: bool,
    /// CSV output (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for plot data and gnuplot stubs
    #[arg(long)]
    plot_dir: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of samples
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Input window length (feature dimension)
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    d: u64,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    stride: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    mass: f64,
    #[arg(long, default_value_t = 0.5)]
    damping: f64,
    #[arg(long, default_value_t = 2.0)]
    stiffness: f64,
    #[arg(long, default_value_t = 1.0)]
    cubic_stiffness: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    /// Forcing amplitude
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Steps each forcing level is held for
    #[arg(long, default_value_t = 50)]
    hold_steps: usize,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct StrongArgs {
    /// Training set file; generated when omitted
    #[arg(long)]
    train: Option<PathBuf>,
    /// Test set file; generated when omitted
    #[arg(long)]
    test: Option<PathBuf>,
    /// Size of generated train and test sets
    #[arg(long, default_value_t = 8192)]
    n: usize,
    /// Worker counts, comma separated
    #[arg(long, env = "GPRS_WORKERS", value_delimiter = ',', default_value = "1,2,4")]
    workers: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    tiles: usize,
    #[command(flatten)]
    bench: BenchArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SizeArgs {
    /// Problem sizes (ascending powers of two), comma separated
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256,512,1024")]
    sizes: Vec<usize>,
    /// Tiles per dimension by size, e.g. 256:1,2048:4,*:16
    #[arg(long, default_value = "256:1,2048:4,*:16")]
    tiles_schedule: String,
    /// Use this many tiles for every size instead of the schedule
    #[arg(long)]
    tiles: Option<usize>,
    #[arg(long, env = "GPRS_WORKERS")]
    workers: Option<usize>,
    #[command(flatten)]
    bench: BenchArgs,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 1)]
    tiles: usize,
    #[arg(long, env = "GPRS_WORKERS")]
    workers: Option<usize>,
    /// Hyperparameters as length_scale,signal_variance,noise_variance
    #[arg(long, value_delimiter = ',', default_value = "1,1,0.1")]
    theta: Vec<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, ValueEnum)]
enum Output {
    Mean,
    Uncertainty,
    FullCov,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value = "uncertainty")]
    output: Output,
    /// Add the noise variance to the test prior covariance
    #[arg(long)]
    noisy_prior: bool,
    /// Predictions file (stdout when omitted): one `mean [variance]` per line
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    opt_iters: u64,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn settings(bench: &BenchArgs, common: &Common) -> BenchSettings {
    BenchSettings {
        experiment: bench.experiment.into(),
        backend: common.backend(),
        reps: bench.reps as usize,
        opt_iters: bench.opt_iters as usize,
        warmup: !bench.no_warmup,
        trace: common.trace.clone(),
    }
}

fn emit(records: &[BenchRecord], bench: &BenchArgs, kind: PlotKind) -> Result<(), Error> {
    match &bench.out {
        Some(path) => harness::write_csv(records, &mut io::BufWriter::new(fs::File::create(path)?))?,
        None => harness::write_csv(records, &mut io::stdout().lock())?,
    }
    let summary = harness::summarize(records)?;
    for g in &summary.groups {
        let na = |v: Option<f64>, p: usize| v.map_or("NA".to_string(), |x| format!("{x:.p$}"));
        eprintln!(
            "{} n={} tiles={} workers={}: mean {:.4}s ci95 {} speedup {} efficiency {}",
            g.key.experiment,
            g.key.n_train,
            g.key.tiles,
            g.key.workers,
            g.mean,
            na(g.ci95, 4),
            na(g.speedup, 3),
            na(g.efficiency, 3)
        );
    }
    if let Some(dir) = &bench.plot_dir {
        for path in harness::emit_plotdata(&summary, dir, kind)? {
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn generate(args: &GenerateArgs) -> Result<(), Error> {
    let cfg = MsdConfig {
        mass: args.mass,
        damping: args.damping,
        stiffness: args.stiffness,
        cubic_stiffness: args.cubic_stiffness,
        dt: args.dt,
        amplitude: args.amplitude,
        hold_steps: args.hold_steps,
        seed: args.seed,
        ..MsdConfig::default()
    };
    let (ds, stats) = simulator::generate(&cfg, args.n as usize, args.d as usize, args.stride as usize)?;
    simulator::save_dataset(&ds, &args.out)?;
    println!("N={} D={}", ds.n(), ds.d());
    println!("feature_mean={:?}", stats.feature_mean);
    println!("feature_std={:?}", stats.feature_std);
    println!("target_mean={:?} target_std={:?}", stats.target_mean, stats.target_std);
    Ok(())
}

fn load_or_generate(path: &Option<PathBuf>, n: usize, seed: u64) -> Result<Dataset, Error> {
    match path {
        Some(p) => simulator::load_dataset(p),
        None => Ok(simulator::generate(&MsdConfig { seed, ..MsdConfig::default() }, n, 3, 10)?.0),
    }
}

fn strong_scaling(args: &StrongArgs) -> Result<(), Error> {
    let train = load_or_generate(&args.train, args.n, args.common.seed)?;
    let test = load_or_generate(&args.test, args.n, args.common.seed.wrapping_add(1))?;
    let records = harness::strong_scaling(&settings(&args.bench, &args.common), &train, &test, args.tiles, &args.workers)?;
    emit(&records, &args.bench, PlotKind::Strong)
}

fn size_scaling(args: &SizeArgs) -> Result<(), Error> {
    let schedule: TilesSchedule = match args.tiles {
        Some(t) => format!("*:{t}").parse()?,
        None => args.tiles_schedule.parse()?,
    };
    let workers = args.workers.unwrap_or_else(default_workers);
    let records =
        harness::size_scaling(&settings(&args.bench, &args.common), &args.sizes, &schedule, workers, args.common.seed)?;
    emit(&records, &args.bench, PlotKind::Size)
}

fn engine(model: &ModelArgs, noisy_prior: bool) -> Result<GpEngine, Error> {
    GpEngine::new(EngineConfig {
        workers: model.workers.unwrap_or_else(default_workers),
        tiles_per_dim: model.tiles,
        backend: model.common.backend(),
        trace: model.common.trace.is_some(),
        noisy_prior,
    })
}

fn finish_trace(engine: &GpEngine, model: &ModelArgs) -> Result<(), Error> {
    if let Some(path) = &model.common.trace {
        write_trace(&engine.runtime()?.take_trace(), path)?;
    }
    Ok(())
}

fn theta(model: &ModelArgs) -> Result<Hyperparameters, Error> {
    match model.theta[..] {
        [l, nu, s2] => Hyperparameters::new(l, nu, s2),
        _ => Err(Error::InvalidConfig("--theta takes three comma-separated values".into())),
    }
}

fn predict(args: &PredictArgs) -> Result<(), Error> {
    let train = simulator::load_dataset(&args.model.train)?;
    let test = simulator::load_dataset(&args.test)?;
    let theta = theta(&args.model)?;
    let engine = engine(&args.model, args.noisy_prior)?;
    let result = match args.output {
        Output::Mean => engine.predict(&train, &test, &theta)?,
        Output::Uncertainty => engine.predict_with_uncertainty(&train, &test, &theta)?,
        Output::FullCov => engine.predict_full_cov(&train, &test, &theta)?,
    };
    finish_trace(&engine, &args.model)?;

    let mut text = String::new();
    for (i, m) in result.mean.iter().enumerate() {
        match &result.variance {
            Some(v) => text.push_str(&format!("{m:?} {:?}\n", v[i])),
            None => text.push_str(&format!("{m:?}\n")),
        }
    }
    write_out(args.out.as_deref(), &text)?;
    let sq: f64 = result.mean.iter().zip(test.targets()).map(|(m, y)| (m - y) * (m - y)).sum();
    eprintln!("rmse against test targets: {:.6}", (sq / test.n() as f64).sqrt());
    Ok(())
}

fn optimize(args: &OptimizeArgs) -> Result<(), Error> {
    let train = simulator::load_dataset(&args.model.train)?;
    let theta0 = theta(&args.model)?;
    let engine = engine(&args.model, false)?;
    let adam = AdamConfig { learning_rate: args.learning_rate, ..AdamConfig::default() };
    let result = engine.optimize(&train, &theta0, args.opt_iters as usize, adam)?;
    finish_trace(&engine, &args.model)?;
    for (i, loss) in result.loss_trace.iter().enumerate() {
        println!("iter {i} loss {loss:.10}");
    }
    println!("theta {}", result.theta);
    println!("final loss {:.10}", engine.nlml(&train, &result.theta)?);
    Ok(())
}

fn write_out(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        e if e.is_numerical() => EXIT_NUMERICAL,
        Error::Io(_)
        | Error::MalformedHeader { .. }
        | Error::RowCount { .. }
        | Error::FieldCount { .. }
        | Error::NonNumeric { .. } => EXIT_IO,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate(a),
        Command::StrongScaling(a) => strong_scaling(a),
        Command::SizeScaling(a) => size_scaling(a),
        Command::Predict(a) => predict(a),
        Command::Optimize(a) => optimize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
