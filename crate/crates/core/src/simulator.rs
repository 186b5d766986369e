//! Nonlinear mass-spring-damper simulator and the dataset file format.
//!
//! The system `m x'' + c x' + k x + k3 x^3 = u(t)` is integrated with
//! classical RK4, holding the input constant over each step. The sample at
//! index `t` pairs the input applied during step `t` with the displacement
//! reached at the end of that step.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::Dataset;

const BLOWUP: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsdConfig {
    pub mass: f64,
    pub damping: f64,
    pub stiffness: f64,
    pub cubic_stiffness: f64,
    pub dt: f64,
    pub n_steps: usize,
    /// Random input steps are drawn uniformly from `[-amplitude, amplitude]`.
    pub amplitude: f64,
    /// Steps each random input level is held for.
    pub hold_steps: usize,
    pub seed: u64,
}

impl Default for MsdConfig {
    fn default() -> Self {
        Self {
            mass: 1.0,
            damping: 0.5,
            stiffness: 2.0,
            cubic_stiffness: 1.0,
            dt: 0.01,
            n_steps: 10_000,
            amplitude: 1.0,
            hold_steps: 50,
            seed: 42,
        }
    }
}

impl MsdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return bad("mass must be positive");
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return bad("damping must be non-negative");
        }
        if !(self.stiffness > 0.0 && self.stiffness.is_finite()) {
            return bad("stiffness must be positive");
        }
        if !self.cubic_stiffness.is_finite() {
            return bad("cubic stiffness must be finite");
        }
        if !(self.dt > 0.0) {
            return bad("time step must be positive");
        }
        if self.dt * (self.stiffness / self.mass).sqrt() >= 0.5 {
            return bad("time step too large: dt * sqrt(k/m) must stay below 0.5");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1");
        }
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return bad("forcing amplitude must be non-negative");
        }
        if self.hold_steps == 0 {
            return bad("hold_steps must be at least 1");
        }
        Ok(())
    }

    /// Steps needed so that a window of `window` and the given stride yield
    /// `n` samples.
    pub fn steps_for_samples(n: usize, window: usize, stride: usize) -> usize {
        window + (n.max(1) - 1) * stride + 1
    }
}

/// Input and displacement, one entry per step.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub u: Vec<f64>,
    pub x: Vec<f64>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

/// Piecewise-constant random input for `cfg`.
pub fn forcing(cfg: &MsdConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut u = Vec::with_capacity(cfg.n_steps);
    let mut level = 0.0;
    for t in 0..cfg.n_steps {
        if t % cfg.hold_steps == 0 {
            level = if cfg.amplitude > 0.0 { rng.gen_range(-cfg.amplitude..=cfg.amplitude) } else { 0.0 };
        }
        u.push(level);
    }
    u
}

/// Simulates from rest under the random input of `cfg`.
pub fn simulate(cfg: &MsdConfig) -> Result<Series> {
    cfg.validate()?;
    simulate_from(cfg, (0.0, 0.0), &forcing(cfg))
}

/// Integrates from `(x, v)` under an explicit input sequence; runs one step
/// per input entry.
pub fn simulate_from(cfg: &MsdConfig, initial: (f64, f64), input: &[f64]) -> Result<Series> {
    cfg.validate()?;
    let (mut x, mut v) = initial;
    let mut out = Vec::with_capacity(input.len());
    for (step, &u) in input.iter().enumerate() {
        (x, v) = rk4_step(cfg, (x, v), u);
        if !(x.abs() <= BLOWUP) || !v.is_finite() {
            return Err(Error::Unstable { step });
        }
        out.push(x);
    }
    Ok(Series { u: input.to_vec(), x: out })
}

/// One RK4 step of `(x, v)` with the input held at `u`.
pub fn rk4_step(cfg: &MsdConfig, (x, v): (f64, f64), u: f64) -> (f64, f64) {
    let accel = |x: f64, v: f64| (u - cfg.damping * v - cfg.stiffness * x - cfg.cubic_stiffness * x * x * x) / cfg.mass;
    let h = cfg.dt;
    let (k1x, k1v) = (v, accel(x, v));
    let (k2x, k2v) = (v + 0.5 * h * k1v, accel(x + 0.5 * h * k1x, v + 0.5 * h * k1v));
    let (k3x, k3v) = (v + 0.5 * h * k2v, accel(x + 0.5 * h * k2x, v + 0.5 * h * k2v));
    let (k4x, k4v) = (v + h * k3v, accel(x + h * k3x, v + h * k3v));
    (
        x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
    )
}

/// Mean and standard deviation per feature column and for the targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardization {
    pub fn transform_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn inverse_target(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }

    pub fn transform_feature(&self, col: usize, z: f64) -> f64 {
        (z - self.feature_mean[col]) / self.feature_std[col]
    }

    pub fn inverse_feature(&self, col: usize, z: f64) -> f64 {
        z * self.feature_std[col] + self.feature_mean[col]
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    // A constant column is only centred.
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    (mean, std)
}

/// Sliding windows of past inputs as features, displacement as target,
/// standardized per column. Samples sit at `t = window, window + stride, ...`.
pub fn make_dataset(series: &Series, window: usize, stride: usize) -> Result<(Dataset, Standardization)> {
    if window == 0 || stride == 0 {
        return Err(Error::InvalidConfig("window and stride must be at least 1".into()));
    }
    if series.len() <= window {
        return Err(Error::SeriesTooShort { len: series.len(), window });
    }
    let times: Vec<usize> = (window..series.len()).step_by(stride).collect();
    let mut features = Vec::with_capacity(times.len() * window);
    for &t in &times {
        features.extend_from_slice(&series.u[t + 1 - window..=t]);
    }
    let targets: Vec<f64> = times.iter().map(|&t| series.x[t]).collect();

    let mut stats = Standardization {
        feature_mean: Vec::with_capacity(window),
        feature_std: Vec::with_capacity(window),
        target_mean: 0.0,
        target_std: 1.0,
    };
    for col in 0..window {
        let (m, s) = mean_std(features.iter().skip(col).step_by(window).copied());
        stats.feature_mean.push(m);
        stats.feature_std.push(s);
    }
    (stats.target_mean, stats.target_std) = mean_std(targets.iter().copied());

    for (idx, z) in features.iter_mut().enumerate() {
        *z = stats.transform_feature(idx % window, *z);
    }
    let targets = targets.iter().map(|&y| stats.transform_target(y)).collect();
    Ok((Dataset::new(features, targets, window)?, stats))
}

/// Simulates just enough steps for `n` samples.
pub fn generate(cfg: &MsdConfig, n: usize, window: usize, stride: usize) -> Result<(Dataset, Standardization)> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be at least 1".into()));
    }
    let cfg = MsdConfig { n_steps: MsdConfig::steps_for_samples(n, window, stride), ..*cfg };
    let (ds, stats) = make_dataset(&simulate(&cfg)?, window, stride)?;
    debug_assert_eq!(ds.n(), n);
    Ok((ds, stats))
}

/// Hexadecimal float literal (`0x1.8p+1`), exact for every finite value.
pub fn format_hex(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp_bits = ((bits >> 52) & 0x7ff) as i64;
    let mantissa = bits & ((1u64 << 52) - 1);
    let (lead, exp) = match (exp_bits, mantissa) {
        (0, 0) => return format!("{sign}0x0p+0"),
        (0, _) => (0, -1022),
        _ => (1, exp_bits - 1023),
    };
    let mut out = format!("{sign}0x{lead}");
    if mantissa != 0 {
        let digits = format!("{mantissa:013x}");
        let _ = write!(out, ".{}", digits.trim_end_matches('0'));
    }
    let _ = write!(out, "p{exp:+}");
    out
}

/// Reads hexadecimal or decimal float text.
pub fn parse_float(s: &str) -> Option<f64> {
    let body = s.trim_start_matches(['+', '-']);
    if body.starts_with("0x") || body.starts_with("0X") {
        hexf_parse::parse_hexf64(s, false).ok()
    } else {
        s.parse().ok()
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# gprs-dataset v1 N={} D={}", ds.n(), ds.d())?;
    let mut line = String::new();
    for i in 0..ds.n() {
        line.clear();
        for &z in ds.point(i) {
            line.push_str(&format_hex(z));
            line.push(' ');
        }
        line.push_str(&format_hex(ds.targets()[i]));
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let malformed = |reason: &str| Error::MalformedHeader { line: 1, reason: reason.to_string() };
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#") || parts.next() != Some("gprs-dataset") {
        return Err(malformed("expected '# gprs-dataset v1 N=<n> D=<d>'"));
    }
    if parts.next() != Some("v1") {
        return Err(malformed("unsupported version"));
    }
    let mut field = |key: &str| -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| malformed(&format!("missing or invalid {key}<count>")))
    };
    let n = field("N=")?;
    let d = field("D=")?;
    if d == 0 {
        return Err(malformed("D must be at least 1"));
    }
    if parts.next().is_some() {
        return Err(malformed("trailing content"));
    }
    Ok((n, d))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::MalformedHeader { line: 1, reason: "empty file".into() }),
    };
    let (n, d) = parse_header(&header)?;
    let mut features = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    let mut line_no = 1;
    for line in lines {
        let line = line?;
        line_no += 1;
        if line.trim().is_empty() {
            continue;
        }
        if targets.len() == n {
            return Err(Error::RowCount { line: line_no, expected: n, found: n + 1 });
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != d + 1 {
            return Err(Error::FieldCount { line: line_no, expected: d + 1, found: fields.len() });
        }
        for (k, f) in fields.iter().enumerate() {
            let v = parse_float(f).ok_or_else(|| Error::NonNumeric { line: line_no, field: f.to_string() })?;
            if k < d {
                features.push(v);
            } else {
                targets.push(v);
            }
        }
    }
    if targets.len() != n {
        return Err(Error::RowCount { line: line_no + 1, expected: n, found: targets.len() });
    }
    Dataset::new(features, targets, d)
}
