//! Benchmark records, summary statistics, plot data and the scaling sweeps
//! driven by the `gprs` binary.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::gp::{AdamConfig, EngineConfig, GpEngine};
use crate::kernels::{Dataset, Hyperparameters};
use crate::simulator::{self, MsdConfig};
use crate::task_runtime::write_trace;
use crate::tile_blas::BackendId;

pub const CSV_HEADER: &str = "experiment,n_train,n_test,tiles,workers,backend,rep,wall_seconds,tasks";

/// Pipeline timed by a benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Experiment {
    /// Hyperparameter optimization (loss, gradient and Adam update).
    Opt,
    /// Prediction with the full posterior covariance.
    PredFull,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Opt => "opt",
            Experiment::PredFull => "pred_full",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "opt" => Ok(Experiment::Opt),
            "pred_full" => Ok(Experiment::PredFull),
            _ => Err(Error::InvalidConfig(format!("unknown experiment {s:?} (expected opt or pred_full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRecord {
    pub experiment: Experiment,
    pub n_train: usize,
    pub n_test: usize,
    pub tiles: usize,
    pub workers: usize,
    pub backend: BackendId,
    pub rep: usize,
    pub wall_seconds: f64,
    pub tasks: u64,
}

impl BenchRecord {
    /// One CSV row; the time is written in shortest round-trip form.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:?},{}",
            self.experiment,
            self.n_train,
            self.n_test,
            self.tiles,
            self.workers,
            self.backend,
            self.rep,
            self.wall_seconds,
            self.tasks
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 9 {
            return Err(Error::InvalidConfig(format!("expected 9 CSV fields, found {}", fields.len())));
        }
        let int = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::InvalidConfig(format!("bad integer {s:?} in CSV row")))
        };
        Ok(Self {
            experiment: fields[0].parse()?,
            n_train: int(fields[1])?,
            n_test: int(fields[2])?,
            tiles: int(fields[3])?,
            workers: int(fields[4])?,
            backend: fields[5].parse()?,
            rep: int(fields[6])?,
            wall_seconds: fields[7]
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad time {:?} in CSV row", fields[7])))?,
            tasks: int(fields[8])? as u64,
        })
    }
}

pub fn write_csv(records: &[BenchRecord], out: &mut impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.to_csv_row())?;
    }
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Vec<BenchRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::InvalidConfig("missing or unexpected CSV header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(BenchRecord::parse_csv_row).collect()
}

/// Mean and the half-width of the 95% Student-t interval. The interval is
/// `None` for a single sample.
pub fn mean_ci95(samples: &[f64]) -> Result<(f64, Option<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() == 1 {
        return Ok((mean, None));
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?
        .inverse_cdf(0.975);
    Ok((mean, Some(t * var.sqrt() / n.sqrt())))
}

/// Configuration shared by the records of one group; `workers` included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroupKey {
    pub experiment: Experiment,
    pub n_train: usize,
    pub n_test: usize,
    pub tiles: usize,
    pub backend: BackendId,
    pub workers: usize,
}

impl GroupKey {
    fn of(r: &BenchRecord) -> Self {
        Self {
            experiment: r.experiment,
            n_train: r.n_train,
            n_test: r.n_test,
            tiles: r.tiles,
            backend: r.backend,
            workers: r.workers,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub key: GroupKey,
    pub samples: usize,
    pub mean: f64,
    pub ci95: Option<f64>,
    /// Relative to the 1-worker group of the same configuration.
    pub speedup: Option<f64>,
    pub efficiency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScalingSummary {
    /// Sorted by configuration, then worker count.
    pub groups: Vec<GroupSummary>,
}

pub fn summarize(records: &[BenchRecord]) -> Result<ScalingSummary> {
    if records.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups.entry(GroupKey::of(r)).or_default().push(r.wall_seconds);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (key, mut times) in groups {
        // Summing in sorted order makes the result independent of input order.
        times.sort_by(f64::total_cmp);
        let (mean, ci95) = mean_ci95(&times)?;
        out.push(GroupSummary { key, samples: times.len(), mean, ci95, speedup: None, efficiency: None });
    }
    let baselines: Vec<(GroupKey, f64)> =
        out.iter().filter(|g| g.key.workers == 1).map(|g| (g.key, g.mean)).collect();
    for g in &mut out {
        let base = baselines.iter().find(|(k, _)| GroupKey { workers: 1, ..g.key } == *k);
        if let Some((_, t1)) = base {
            let s = t1 / g.mean;
            g.speedup = Some(s);
            g.efficiency = Some(s / g.key.workers as f64);
        }
    }
    Ok(ScalingSummary { groups: out })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// x = workers, one file per problem configuration.
    Strong,
    /// x = N, one file per experiment and worker count, log-log axes.
    Size,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6e}"))
}

/// Writes whitespace-separated data files plus a gnuplot script stub next to
/// each; returns the data file paths.
pub fn emit_plotdata(summary: &ScalingSummary, dir: &Path, kind: PlotKind) -> Result<Vec<PathBuf>> {
    if summary.groups.is_empty() {
        return Err(Error::EmptyGroup);
    }
    fs::create_dir_all(dir)?;
    let mut files: BTreeMap<String, Vec<&GroupSummary>> = BTreeMap::new();
    for g in &summary.groups {
        let k = g.key;
        let name = match kind {
            PlotKind::Strong => format!("strong_{}_n{}_m{}_t{}_{}", k.experiment, k.n_train, k.n_test, k.tiles, k.backend),
            PlotKind::Size => format!("size_{}_w{}_{}", k.experiment, k.workers, k.backend),
        };
        files.entry(name).or_default().push(g);
    }
    let mut written = Vec::new();
    for (name, mut rows) in files {
        let data_path = dir.join(format!("{name}.dat"));
        let mut text = String::new();
        match kind {
            PlotKind::Strong => {
                rows.sort_by_key(|g| g.key.workers);
                text.push_str("# workers mean ci95 speedup efficiency\n");
                for g in &rows {
                    text.push_str(&format!(
                        "{} {:.6e} {} {} {}\n",
                        g.key.workers,
                        g.mean,
                        fmt_opt(g.ci95),
                        fmt_opt(g.speedup),
                        fmt_opt(g.efficiency)
                    ));
                }
            }
            PlotKind::Size => {
                rows.sort_by_key(|g| (g.key.n_train, g.key.tiles));
                text.push_str("# n mean ci95 tiles\n");
                for g in &rows {
                    text.push_str(&format!("{} {:.6e} {} {}\n", g.key.n_train, g.mean, fmt_opt(g.ci95), g.key.tiles));
                }
            }
        }
        fs::write(&data_path, text)?;

        let (xlabel, logscale, errorbars) = match kind {
            PlotKind::Strong => ("workers", "set logscale x 2", "using 1:2:3"),
            PlotKind::Size => ("N", "set logscale xy", "using 1:2:3"),
        };
        let script = format!(
            "set xlabel \"{xlabel}\"\nset ylabel \"seconds\"\n{logscale}\n\
             plot \"{name}.dat\" {errorbars} with yerrorlines title \"{name}\"\n"
        );
        fs::write(dir.join(format!("{name}.gp")), script)?;
        written.push(data_path);
    }
    Ok(written)
}

/// Tiles per dimension as a function of N, e.g. `256:1,2048:4,*:16`: the
/// first entry whose bound is at least N applies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilesSchedule {
    steps: Vec<(Option<usize>, usize)>,
}

impl Default for TilesSchedule {
    fn default() -> Self {
        Self { steps: vec![(Some(256), 1), (Some(2048), 4), (None, 16)] }
    }
}

impl FromStr for TilesSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad tiles schedule {s:?} (expected e.g. 256:1,2048:4,*:16)"));
        let mut steps = Vec::new();
        for part in s.split(',') {
            let (bound, tiles) = part.trim().split_once(':').ok_or_else(bad)?;
            let bound = if bound == "*" { None } else { Some(bound.parse().map_err(|_| bad())?) };
            let tiles: usize = tiles.parse().map_err(|_| bad())?;
            if tiles == 0 {
                return Err(bad());
            }
            steps.push((bound, tiles));
        }
        if steps.last().map(|s| s.0) != Some(None) || steps[..steps.len() - 1].iter().any(|s| s.0.is_none()) {
            return Err(bad());
        }
        Ok(Self { steps })
    }
}

impl TilesSchedule {
    /// Never more tiles than points.
    pub fn tiles_for(&self, n: usize) -> usize {
        let t = self
            .steps
            .iter()
            .find(|(bound, _)| bound.map_or(true, |b| n <= b))
            .map_or(1, |s| s.1);
        t.min(n.max(1))
    }
}

/// Initial hyperparameters used by every benchmark.
pub fn default_theta() -> Hyperparameters {
    Hyperparameters::default()
}

/// Runs one pipeline on the engine's pool.
pub fn run_pipeline(
    engine: &GpEngine,
    experiment: Experiment,
    train: &Dataset,
    test: &Dataset,
    opt_iters: usize,
) -> Result<()> {
    match experiment {
        Experiment::Opt => engine.optimize(train, &default_theta(), opt_iters, AdamConfig::default()).map(|_| ()),
        Experiment::PredFull => engine.predict_full_cov(train, test, &default_theta()).map(|_| ()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSettings {
    pub experiment: Experiment,
    pub backend: BackendId,
    pub reps: usize,
    pub opt_iters: usize,
    pub warmup: bool,
    /// Writes the task trace of the last repetition of each configuration
    /// to `<trace>.<n>.<workers>`.
    pub trace: Option<PathBuf>,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            experiment: Experiment::PredFull,
            backend: BackendId::preferred(),
            reps: 10,
            opt_iters: 1,
            warmup: true,
            trace: None,
        }
    }
}

/// Times `reps` repetitions of one configuration on a fresh pool.
pub fn bench_config(
    settings: &BenchSettings,
    train: &Dataset,
    test: &Dataset,
    tiles: usize,
    workers: usize,
) -> Result<Vec<BenchRecord>> {
    if settings.reps == 0 {
        return Err(Error::InvalidConfig("reps must be at least 1".into()));
    }
    let engine = GpEngine::new(EngineConfig {
        workers,
        tiles_per_dim: tiles,
        backend: settings.backend,
        trace: settings.trace.is_some(),
        noisy_prior: false,
    })?;
    let rt = engine.runtime()?;
    if settings.warmup {
        run_pipeline(&engine, settings.experiment, train, test, settings.opt_iters)?;
    }
    let mut records = Vec::with_capacity(settings.reps);
    for rep in 1..=settings.reps {
        let _ = rt.take_trace();
        let before = rt.stats().tasks_executed;
        let start = Instant::now();
        run_pipeline(&engine, settings.experiment, train, test, settings.opt_iters)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        let tasks = rt.stats().tasks_executed - before;
        log::info!(
            "{} n={} tiles={} workers={} rep={} {:.4}s {} tasks",
            settings.experiment,
            train.n(),
            tiles,
            workers,
            rep,
            wall_seconds,
            tasks
        );
        records.push(BenchRecord {
            experiment: settings.experiment,
            n_train: train.n(),
            n_test: test.n(),
            tiles,
            workers,
            backend: settings.backend,
            rep,
            wall_seconds,
            tasks,
        });
    }
    if let Some(base) = &settings.trace {
        let path = PathBuf::from(format!("{}.{}.{}", base.display(), train.n(), workers));
        write_trace(&rt.take_trace(), &path)?;
    }
    Ok(records)
}

/// One configuration per worker count, each on its own pool.
pub fn strong_scaling(
    settings: &BenchSettings,
    train: &Dataset,
    test: &Dataset,
    tiles: usize,
    workers: &[usize],
) -> Result<Vec<BenchRecord>> {
    if workers.is_empty() {
        return Err(Error::InvalidConfig("worker list is empty".into()));
    }
    let mut records = Vec::new();
    for &w in workers {
        records.extend(bench_config(settings, train, test, tiles, w)?);
    }
    Ok(records)
}

/// Simulator datasets for a sweep point: `n` training and `n` test samples
/// from two independent runs.
pub fn synthetic_pair(n: usize, seed: u64, window: usize, stride: usize) -> Result<(Dataset, Dataset)> {
    let cfg = MsdConfig { seed, ..MsdConfig::default() };
    let (train, _) = simulator::generate(&cfg, n, window, stride)?;
    let (test, _) = simulator::generate(&MsdConfig { seed: seed.wrapping_add(1), ..cfg }, n, window, stride)?;
    Ok((train, test))
}

pub fn size_scaling(
    settings: &BenchSettings,
    sizes: &[usize],
    schedule: &TilesSchedule,
    workers: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("size list is empty".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.iter().any(|n| !n.is_power_of_two()) {
        return Err(Error::InvalidConfig("sizes must be ascending powers of two".into()));
    }
    let mut records = Vec::new();
    for &n in sizes {
        let (train, test) = synthetic_pair(n, seed, 3, 10)?;
        records.extend(bench_config(settings, &train, &test, schedule.tiles_for(n), workers)?);
    }
    Ok(records)
}
