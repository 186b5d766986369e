mod common;

use common::*;
use gprs::gp::{CholeskyFactor, EngineConfig, GpEngine};
use gprs::simulator::{self, MsdConfig};
use gprs::task_runtime::write_trace;
use gprs::tiled_matrix::{Tile, TileSpec, TiledPanel, TiledSymmetricMatrix, TiledVector};
use gprs::{BackendId, Dataset, Error, Hyperparameters};

fn engine(workers: usize, tiles: usize) -> GpEngine {
    GpEngine::new(EngineConfig { workers, tiles_per_dim: tiles, ..Default::default() }).unwrap()
}

fn dense_from(m: &Mat) -> Tile {
    Tile::from_fn(m.len(), m.len(), |r, c| m[r][c])
}

#[test]
fn matches_oracle_with_fully_padded_trailing_tiles() {
    // 10 points in 6 tiles: tile size 2, last tile is pure padding.
    let mut rng = rng(11);
    let train = random_dataset(&mut rng, 10, 2);
    let test = random_dataset(&mut rng, 7, 2);
    let th = [0.9, 1.4, 0.2];
    let want = posterior(&train, &test, th);
    let e = engine(2, 6);
    let got = e.predict_full_cov(&train, &test, &hp(th)).unwrap();
    assert!(rel_err(&got.mean, &want.mean) < 1e-12);
    assert!(rel_err(got.variance.as_ref().unwrap(), &want.variance) < 1e-12);
    assert!(rel_err(got.full_cov.as_ref().unwrap().as_slice(), &flatten(&want.cov)) < 1e-12);
    assert!((e.nlml(&train, &hp(th)).unwrap() - nlml(&train, th)).abs() < 1e-12);
}

#[test]
fn factor_reconstructs_covariance() {
    let mut rng = rng(12);
    let train = random_dataset(&mut rng, 37, 3);
    let th = [1.1, 0.7, 0.05];
    let e = engine(3, 5);
    let l = e.factorize(&train, &hp(th)).unwrap().to_dense();
    let want = cholesky(&covariance(&train, th)).unwrap();
    assert!(rel_err(l.as_slice(), &flatten(&want)) < 1e-12);
    for r in 0..l.rows() {
        for c in r + 1..l.cols() {
            assert_eq!(l.get(r, c), 0.0);
        }
    }
}

#[test]
fn solves_match_dense_substitution() {
    let mut rng = rng(13);
    let train = random_dataset(&mut rng, 23, 1);
    let th = [0.5, 2.0, 0.3];
    let e = engine(2, 4);
    let factor = e.factorize(&train, &hp(th)).unwrap();
    let spec = factor.spec();
    let l = cholesky(&covariance(&train, th)).unwrap();
    let b: Vec<f64> = (0..23).map(|i| (i as f64 * 0.7).sin()).collect();
    let tv = TiledVector::scatter(spec, &b).unwrap();
    let z = e.forward_substitution(&factor, &tv).unwrap().gather();
    assert!(rel_err(&z, &forward(&l, &b)) < 1e-12);
    let x = e.backward_substitution(&factor, &tv).unwrap().gather();
    assert!(rel_err(&x, &backward(&l, &b)) < 1e-12);
    let s = e.solve(&factor, &tv).unwrap().gather();
    assert!(rel_err(&s, &backward(&l, &forward(&l, &b))) < 1e-12);
}

#[test]
fn nan_in_padding_never_reaches_outputs() {
    let mut rng = rng(14);
    let train = random_dataset(&mut rng, 11, 2);
    let e = engine(2, 3);
    let factor = e.factorize(&train, &hp([1.0, 1.0, 0.1])).unwrap();
    let spec = factor.spec();
    assert_eq!(spec.padded_len(), 12);
    let b: Vec<f64> = (0..11).map(|i| i as f64 - 5.0).collect();
    let mut poisoned = TiledVector::scatter(spec, &b).unwrap();
    poisoned.fill_padding(f64::NAN);
    let clean = TiledVector::scatter(spec, &b).unwrap();
    assert_eq!(e.forward_substitution(&factor, &poisoned).unwrap(), e.forward_substitution(&factor, &clean).unwrap());
    assert_eq!(e.backward_substitution(&factor, &poisoned).unwrap(), e.backward_substitution(&factor, &clean).unwrap());

    // Panel with NaN in both padded rows and padded columns.
    let rows = TileSpec::new(5, 2).unwrap();
    let dense = Tile::from_fn(5, 11, |r, c| (r * 11 + c) as f64 * 0.01);
    let clean = TiledPanel::from_dense(rows, spec, &dense).unwrap();
    let mut tiles = clean.tiles().to_vec();
    for (idx, t) in tiles.iter_mut().enumerate() {
        let (i, j) = (idx / spec.tiles_per_dim(), idx % spec.tiles_per_dim());
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                if r >= rows.valid_len(i) || c >= spec.valid_len(j) {
                    t.set(r, c, f64::NAN);
                }
            }
        }
    }
    let poisoned = TiledPanel::from_tiles(rows, spec, tiles).unwrap();
    let a = e.panel_forward_substitution(&factor, &clean).unwrap().to_dense();
    let b = e.panel_forward_substitution(&factor, &poisoned).unwrap().to_dense();
    assert!(b.as_slice().iter().all(|v| v.is_finite()));
    assert_eq!(a, b);
}

#[test]
fn panel_solve_matches_dense() {
    let mut rng = rng(15);
    let train = random_dataset(&mut rng, 19, 2);
    let test = random_dataset(&mut rng, 9, 2);
    let th = [0.8, 1.0, 0.1];
    let e = engine(2, 4);
    let factor = e.factorize(&train, &hp(th)).unwrap();
    let kc = cross(&test, &train, th);
    let panel = TiledPanel::from_dense(TileSpec::new(9, 3).unwrap(), factor.spec(), &Tile::from_fn(9, 19, |r, c| kc[r][c]))
        .unwrap();
    let w = e.panel_forward_substitution(&factor, &panel).unwrap().to_dense();
    let l = cholesky(&covariance(&train, th)).unwrap();
    for r in 0..9 {
        let v = forward(&l, &kc[r]);
        assert!(rel_err(w.row(r), &v) < 1e-12);
    }
}

#[test]
fn variance_is_diagonal_of_full_covariance() {
    let mut rng = rng(16);
    let train = random_dataset(&mut rng, 40, 2);
    let test = random_dataset(&mut rng, 15, 2);
    let theta = hp([0.6, 1.2, 0.05]);
    let e = engine(2, 4);
    let unc = e.predict_with_uncertainty(&train, &test, &theta).unwrap();
    let full = e.predict_full_cov(&train, &test, &theta).unwrap();
    let cov = full.full_cov.unwrap();
    let diag: Vec<f64> = (0..15).map(|i| cov.get(i, i)).collect();
    assert!(rel_err(unc.variance.as_ref().unwrap(), &diag) < 1e-13);
    assert_eq!(unc.mean, full.mean);
    assert_eq!(cov, cov.transpose());
    // Posterior variance lies between zero and the prior variance.
    for v in unc.variance.unwrap() {
        assert!(v > -1e-12 && v <= 1.2 + 1e-12);
    }
}

#[test]
fn noisy_prior_adds_noise_variance() {
    let mut rng = rng(17);
    let train = random_dataset(&mut rng, 12, 1);
    let test = random_dataset(&mut rng, 5, 1);
    let theta = hp([1.0, 1.0, 0.25]);
    let plain = engine(1, 2).predict_with_uncertainty(&train, &test, &theta).unwrap();
    let noisy = GpEngine::new(EngineConfig { tiles_per_dim: 2, noisy_prior: true, ..Default::default() })
        .unwrap()
        .predict_with_uncertainty(&train, &test, &theta)
        .unwrap();
    for (a, b) in plain.variance.unwrap().iter().zip(noisy.variance.unwrap()) {
        assert!((b - a - 0.25).abs() < 1e-14);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = rng(18);
    let train = random_dataset(&mut rng, 30, 2);
    let th = [0.7, 1.5, 0.2];
    let g = engine(2, 3).nlml_gradient(&train, &hp(th)).unwrap();
    let fd = fd_gradient(&train, th, 1e-6);
    for k in 0..3 {
        assert!((g[k] - fd[k]).abs() <= 1e-6 * fd[k].abs().max(1.0), "{k}: {} vs {}", g[k], fd[k]);
    }
}

#[test]
fn failing_tile_is_reported_and_downstream_skipped() {
    // Two identical points with zero noise: K is singular in its second tile.
    let train = Dataset::new(vec![0.0, 1.0, 2.0, 3.0, 3.0, 5.0], vec![0.0; 6], 1).unwrap();
    let e = engine(2, 3);
    let err = e.nlml(&train, &Hyperparameters::new(0.1, 1.0, 0.0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::NotPositiveDefinite { tile: Some(2), pivot: 4 }), "{err:?}");
    let stats = e.runtime().unwrap().stats();
    assert!(stats.tasks_skipped > 0);
}

#[test]
fn singular_factor_tile_rejected_by_solve() {
    let spec = TileSpec::new(2, 1).unwrap();
    let factor = CholeskyFactor {
        factor: TiledSymmetricMatrix::from_tiles(spec, vec![Tile::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]])]).unwrap(),
        theta_used: None,
    };
    let err = engine(1, 1).forward_substitution(&factor, &TiledVector::scatter(spec, &[1.0, 1.0]).unwrap());
    assert_eq!(err.unwrap_err(), Error::SingularTriangular { index: 1 });
}

#[test]
fn prediction_rejects_mismatched_dimensions() {
    let train = Dataset::new(vec![0.0, 1.0], vec![1.0], 2).unwrap();
    let test = Dataset::from_features(vec![0.0], 1).unwrap();
    let err = engine(1, 1).predict(&train, &test, &Hyperparameters::default()).unwrap_err();
    assert_eq!(err, Error::DimensionMismatch { expected: 2, found: 1 });
    assert!(matches!(engine(1, 2).nlml(&train, &Hyperparameters::default()), Err(Error::InvalidTiling { .. })));
}

#[test]
fn dense_cholesky_round_trip_through_tiles() {
    let mut rng = rng(19);
    let train = random_dataset(&mut rng, 17, 2);
    let th = [1.3, 0.8, 0.4];
    let k = dense_from(&covariance(&train, th));
    let spec = TileSpec::new(17, 4).unwrap();
    let tiled = TiledSymmetricMatrix::from_dense(spec, &k).unwrap();
    let e = engine(2, 4);
    assert_eq!(e.assemble_covariance(&train, &hp(th)).unwrap().to_dense(), k);
    let l = e.tiled_cholesky(&tiled).unwrap().to_dense();
    let want = cholesky(&covariance(&train, th)).unwrap();
    assert!(rel_err(l.as_slice(), &flatten(&want)) < 1e-12);
}

#[test]
fn trace_records_every_task() {
    let mut rng = rng(20);
    let train = random_dataset(&mut rng, 32, 1);
    let e = GpEngine::new(EngineConfig { workers: 2, tiles_per_dim: 4, trace: true, ..Default::default() }).unwrap();
    e.nlml(&train, &Hyperparameters::default()).unwrap();
    let rt = e.runtime().unwrap();
    let events = rt.take_trace();
    assert_eq!(events.len() as u64, rt.stats().tasks_executed);
    assert_eq!(events.iter().filter(|ev| ev.label.kind == "potrf").count(), 4);
    assert_eq!(events.iter().filter(|ev| ev.label.kind == "gemm").count(), 4);
    for ev in &events {
        assert!(ev.end_ns >= ev.start_ns);
        // Every dependency ran before its consumer started.
        for d in &ev.deps {
            let dep = events.iter().find(|x| x.task_id == *d).unwrap();
            assert!(dep.end_ns <= ev.start_ns);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.txt");
    write_trace(&events, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let line = text.lines().find(|l| l.contains(" potrf ")).unwrap();
    assert_eq!(line.split_whitespace().count(), 6);
}

#[test]
fn system_backend_matches_reference_pipeline() {
    if !BackendId::System.is_available() {
        return;
    }
    let mut rng = rng(21);
    let train = random_dataset(&mut rng, 70, 2);
    let test = random_dataset(&mut rng, 20, 2);
    let theta = hp([0.9, 1.1, 0.1]);
    let run = |backend| {
        GpEngine::new(EngineConfig { workers: 2, tiles_per_dim: 3, backend, ..Default::default() })
            .unwrap()
            .predict_full_cov(&train, &test, &theta)
            .unwrap()
    };
    let (a, b) = (run(BackendId::Reference), run(BackendId::System));
    assert!(rel_err(&b.mean, &a.mean) < 1e-11);
    assert!(rel_err(b.full_cov.unwrap().as_slice(), a.full_cov.unwrap().as_slice()) < 1e-11);
}

// A stiff, well damped oscillator held long enough to settle, so the input
// window determines the displacement.
#[test]
fn fit_on_simulator_data_beats_prior_mean() {
    for seed in [1, 42] {
        let cfg = MsdConfig {
            damping: 14.0,
            stiffness: 100.0,
            cubic_stiffness: 100.0,
            amplitude: 5.0,
            hold_steps: 200,
            seed,
            ..MsdConfig::default()
        };
        let (all, _) = simulator::generate(&cfg, 640, 3, 10).unwrap();
        let train = all.slice(0..512);
        let test = all.slice(512..640);
        let e = engine(2, 4);
        let fit = e.optimize(&train, &Hyperparameters::default(), 30, Default::default()).unwrap();
        let pred = e.predict(&train, &test, &fit.theta).unwrap();
        let n = test.n() as f64;
        let mean_y = test.targets().iter().sum::<f64>() / n;
        let std_y = (test.targets().iter().map(|y| (y - mean_y).powi(2)).sum::<f64>() / n).sqrt();
        let rmse = (pred.mean.iter().zip(test.targets()).map(|(m, y)| (m - y).powi(2)).sum::<f64>() / n).sqrt();
        assert!(rmse / std_y < 0.9, "seed {seed}: rmse {rmse} std {std_y} theta {}", fit.theta);
    }
}

#[test]
fn default_simulation_is_stable() {
    let cfg = MsdConfig { n_steps: 200_000, ..MsdConfig::default() };
    assert!(simulator::simulate(&cfg).is_ok());
}
