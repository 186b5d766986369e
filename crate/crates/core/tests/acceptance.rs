//! Acceptance checks. Runs as a plain binary (no libtest harness) so that the
//! one-line verdict per criterion is always printed.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use rand::Rng;

use common::*;
use gprs::gp::{AdamConfig, EngineConfig, GpEngine};
use gprs::harness::{self, BenchSettings, Experiment};
use gprs::simulator::{self, MsdConfig};
use gprs::{BackendId, Dataset, Error};

enum Verdict {
    Pass(String),
    Fail(String),
    /// A precondition of the criterion does not hold on this host.
    NotVerifiable(String),
}

fn engine(workers: usize, tiles: usize, backend: BackendId) -> GpEngine {
    GpEngine::new(EngineConfig { workers, tiles_per_dim: tiles, backend, ..Default::default() }).unwrap()
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn oracle_equivalence() -> Result<Verdict, Error> {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut worst: f64 = 0.0;
    let mut e = engine(2, 1, BackendId::Reference);
    for _ in 0..50 {
        let n = rng.gen_range(1..=256);
        let m = rng.gen_range(1..=256);
        let d = rng.gen_range(1..=4);
        let train = random_dataset(&mut rng, n, d);
        let test = random_dataset(&mut rng, m, d);
        let th = random_theta(&mut rng, 0.1, 10.0, 0.01);
        e.set_tiles_per_dim(rng.gen_range(1..=n.min(16)));
        let theta = hp(th);
        let want = posterior(&train, &test, th);

        let mean = e.predict(&train, &test, &theta)?.mean;
        let unc = e.predict_with_uncertainty(&train, &test, &theta)?;
        let full = e.predict_full_cov(&train, &test, &theta)?;
        let loss = e.nlml(&train, &theta)?;
        let errs = [
            rel_err(&mean, &want.mean),
            rel_err(&unc.mean, &want.mean),
            rel_err(unc.variance.as_ref().unwrap(), &want.variance),
            rel_err(&full.mean, &want.mean),
            rel_err(full.full_cov.as_ref().unwrap().as_slice(), &flatten(&want.cov)),
            rel_err(&[loss], &[nlml(&train, th)]),
        ];
        worst = errs.iter().fold(worst, |w, &x| w.max(x));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(check(worst <= 1e-9 && secs < 120.0, format!("max rel err {worst:.2e} over 50 instances, {secs:.1}s")))
}

fn gradient_check() -> Result<Verdict, Error> {
    let start = Instant::now();
    let mut rng = rng(2);
    let mut worst: f64 = 0.0;
    let e = engine(2, 4, BackendId::Reference);
    for _ in 0..20 {
        let n = rng.gen_range(4..=64);
        let d = rng.gen_range(1..=3);
        let train = random_dataset(&mut rng, n, d);
        let th = random_theta(&mut rng, 0.1, 10.0, 0.01);
        let g = e.nlml_gradient(&train, &hp(th))?;
        let fd = fd_gradient(&train, th, 1e-6);
        for k in 0..3 {
            worst = worst.max((g[k] - fd[k]).abs() / fd[k].abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(check(
        worst < 1e-5 && secs < 60.0,
        format!("max rel err {worst:.2e} vs central differences (h=1e-6) on 20 cases, {secs:.1}s"),
    ))
}

fn tile_invariance() -> Result<Verdict, Error> {
    let mut rng = rng(3);
    let train = random_dataset(&mut rng, 512, 2);
    let test = random_dataset(&mut rng, 64, 2);
    let theta = hp([0.8, 1.5, 0.05]);
    let mut e = engine(2, 1, BackendId::Reference);
    let base_loss = e.nlml(&train, &theta)?;
    let base = e.predict_with_uncertainty(&train, &test, &theta)?;
    let mut worst: f64 = 0.0;
    for t in [2, 4, 8, 16] {
        e.set_tiles_per_dim(t);
        let r = e.predict_with_uncertainty(&train, &test, &theta)?;
        worst = worst
            .max(rel_err(&[e.nlml(&train, &theta)?], &[base_loss]))
            .max(rel_err(&r.mean, &base.mean))
            .max(rel_err(r.variance.as_ref().unwrap(), base.variance.as_ref().unwrap()));
    }
    Ok(check(worst <= 1e-9, format!("max rel err {worst:.2e} across T in {{1,2,4,8,16}}, N=512")))
}

fn determinism() -> Result<Verdict, Error> {
    let mut rng = rng(4);
    let train = random_dataset(&mut rng, 512, 3);
    let test = random_dataset(&mut rng, 100, 3);
    let theta = hp([1.2, 0.9, 0.1]);
    let mut outputs = Vec::new();
    for w in [1, 2, 4] {
        let e = engine(w, 8, BackendId::Reference);
        let (loss, grad) = e.nlml_and_gradient(&train, &theta)?;
        let p = e.predict_full_cov(&train, &test, &theta)?;
        let mut bits: Vec<u64> = vec![loss.to_bits()];
        bits.extend(grad.iter().map(|g| g.to_bits()));
        bits.extend(p.mean.iter().map(|v| v.to_bits()));
        bits.extend(p.full_cov.unwrap().as_slice().iter().map(|v| v.to_bits()));
        outputs.push(bits);
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    Ok(check(same, format!("{} output words bitwise equal for workers 1, 2, 4 (N=512, T=8)", outputs[0].len())))
}

fn task_counts() -> Result<Verdict, Error> {
    let mut detail = Vec::new();
    let mut ok = true;
    for t in [1usize, 2, 3, 4, 8, 16] {
        let e = engine(2, t, BackendId::Reference);
        let mut rng = rng(5);
        let train = random_dataset(&mut rng, 8 * t, 1);
        let k = e.assemble_covariance(&train, &hp([1.0, 1.0, 0.1]))?;
        let rt = e.runtime()?;
        let before = rt.stats().tasks_executed;
        e.tiled_cholesky(&k)?;
        let executed = rt.stats().tasks_executed - before;
        let expected = (t + t * (t - 1) + t * (t - 1) * t.saturating_sub(2) / 6) as u64;
        ok &= executed == expected;
        detail.push(format!("T={t}:{executed}/{expected}"));
    }
    Ok(check(ok, detail.join(" ")))
}

fn strong_scaling() -> Result<Verdict, Error> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let settings = BenchSettings {
        experiment: Experiment::PredFull,
        backend: BackendId::preferred(),
        reps: 10,
        ..BenchSettings::default()
    };
    if cores < 4 {
        // Still exercise the measurement path at a small size.
        let (train, test) = harness::synthetic_pair(256, 42, 3, 10)?;
        let smoke = BenchSettings { reps: 2, ..settings };
        let summary = harness::summarize(&harness::strong_scaling(&smoke, &train, &test, 4, &[1, 2])?)?;
        let s2 = summary.groups.iter().find(|g| g.key.workers == 2).and_then(|g| g.speedup).unwrap_or(f64::NAN);
        return Ok(Verdict::NotVerifiable(format!(
            "host has {cores} core(s), criterion needs >= 4; smoke run N=256 S(2)={s2:.2}"
        )));
    }
    let start = Instant::now();
    let (train, test) = harness::synthetic_pair(2048, 42, 3, 10)?;
    let summary = harness::summarize(&harness::strong_scaling(&settings, &train, &test, 16, &[1, 2, 4])?)?;
    let speedup = |w: usize| summary.groups.iter().find(|g| g.key.workers == w).and_then(|g| g.speedup).unwrap();
    let (s2, s4) = (speedup(2), speedup(4));
    let secs = start.elapsed().as_secs_f64();
    Ok(check(
        s2 >= 1.3 && s4 >= 1.5 && secs < 600.0,
        format!("S(2)={s2:.2} S(4)={s4:.2} on {cores} cores, backend {}, {secs:.0}s", settings.backend),
    ))
}

fn optimization_progress() -> Result<Verdict, Error> {
    let (train, _) = simulator::generate(&MsdConfig::default(), 512, 3, 10)?;
    let e = engine(2, 4, BackendId::preferred());
    let r = e.optimize(&train, &gprs::Hyperparameters::default(), 20, AdamConfig::default())?;
    let trace = &r.loss_trace;
    let decreased = trace.last() < trace.first();
    let monotone = trace[3..].windows(2).all(|w| w[1] <= w[0]);
    Ok(check(
        trace.len() == 20 && decreased && monotone,
        format!("loss {:.4} -> {:.4}, non-increasing from iteration 3: {monotone}", trace[0], trace[19]),
    ))
}

fn statistics() -> Result<Verdict, Error> {
    let samples: Vec<f64> = (1..=10).map(f64::from).collect();
    let (mean, ci) = harness::mean_ci95(&samples)?;
    let ci = ci.unwrap_or(f64::NAN);
    Ok(check(mean == 5.5 && (ci - 2.166).abs() <= 1e-3, format!("mean {mean}, ci95 {ci:.5}")))
}

fn backend_swap() -> Result<Verdict, Error> {
    if !BackendId::System.is_available() {
        return Ok(Verdict::NotVerifiable("system backend not available in this build or on this host".into()));
    }
    let mut rng = rng(9);
    let train = random_dataset(&mut rng, 256, 2);
    let test = random_dataset(&mut rng, 64, 2);
    let theta = hp([0.7, 1.3, 0.05]);
    let run = |b: BackendId| -> Result<(f64, [f64; 3], Vec<f64>, Vec<f64>), Error> {
        let e = engine(2, 4, b);
        let (loss, grad) = e.nlml_and_gradient(&train, &theta)?;
        let p = e.predict_full_cov(&train, &test, &theta)?;
        Ok((loss, grad, p.mean, p.full_cov.unwrap().into_vec()))
    };
    let (a, b) = (run(BackendId::Reference)?, run(BackendId::System)?);
    let worst = rel_err(&[a.0], &[b.0])
        .max(rel_err(&a.1, &b.1))
        .max(rel_err(&a.2, &b.2))
        .max(rel_err(&a.3, &b.3));
    Ok(check(worst <= 1e-9, format!("max rel err {worst:.2e} reference vs system, N=256")))
}

fn dataset_round_trip() -> Result<Verdict, Error> {
    let dir = tempfile::tempdir().map_err(Error::from)?;
    let cfg = MsdConfig { seed: 17, ..MsdConfig::default() };
    let (a, _) = simulator::generate(&cfg, 300, 3, 10)?;
    let (b, _) = simulator::generate(&cfg, 300, 3, 10)?;
    let (pa, pb) = (dir.path().join("a.ds"), dir.path().join("b.ds"));
    simulator::save_dataset(&a, &pa)?;
    simulator::save_dataset(&b, &pb)?;
    let loaded = simulator::load_dataset(&pa)?;
    let bits = |d: &Dataset| d.features().iter().chain(d.targets()).map(|v| v.to_bits()).collect::<Vec<_>>();
    let exact = bits(&loaded) == bits(&a) && loaded.d() == a.d();
    let same_bytes = std::fs::read(&pa)? == std::fs::read(&pb)?;
    Ok(check(exact && same_bytes, format!("bitwise reload: {exact}, identical files for one seed: {same_bytes}")))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Result<Verdict, Error>); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradient check", gradient_check),
        ("tile invariance", tile_invariance),
        ("determinism across workers", determinism),
        ("cholesky task count", task_counts),
        ("strong scaling", strong_scaling),
        ("optimization progress", optimization_progress),
        ("statistics", statistics),
        ("backend swap", backend_swap),
        ("dataset round trip", dataset_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Ok(Verdict::Pass(d)) => ("PASS", d),
            Ok(Verdict::NotVerifiable(d)) => ("NOT VERIFIABLE", d),
            Ok(Verdict::Fail(d)) => {
                failed += 1;
                ("FAIL", d)
            }
            Err(e) => {
                failed += 1;
                ("FAIL", format!("error: {e}"))
            }
        };
        println!("criterion {:>2} {name}: {tag} ({detail})", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
