//! Gaussian-process pipelines expressed as tiled dataflow graphs.
//!
//! Every public operation of [`GpEngine`] assembles the tiles it needs,
//! submits one task graph to the engine's pool and blocks until the result is
//! available. Each tile value is produced by a fixed chain of tasks, so the
//! output does not depend on how the pool schedules them: results are bitwise
//! identical for any worker count.
//!
//! Conventions:
//! * `K = L L^T` is factorized with the right-looking tiled Cholesky.
//! * Solves against the cross-covariance are carried out in the test-major
//!   layout `W = K_cross L^-T` (the transpose of `V = L^-1 K_cross^T`), which
//!   maps directly onto the `X L^T = B` triangular solve.
//! * The posterior covariance is `K_test - W W^T`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, Dataset, Hyperparameters};
use crate::task_runtime::{wait_all, PoolConfig, RunStats, Runtime, TaskFuture, TaskLabel};
use crate::tile_blas::{BackendId, Blas, Transpose};
use crate::tiled_matrix::{Tile, TileSpec, TiledPanel, TiledSymmetricMatrix, TiledVector};

type TileF = TaskFuture<Tile>;
type SegF = TaskFuture<Vec<f64>>;
type ScalarF = TaskFuture<f64>;

#[inline]
fn packed(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

fn label(kind: &'static str, coords: &[usize]) -> TaskLabel {
    TaskLabel::new(kind, coords)
}

/// Lower Cholesky factor stored in the lower tile triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub factor: TiledSymmetricMatrix,
    /// Hyperparameters the factorized covariance was assembled with, if any.
    pub theta_used: Option<Hyperparameters>,
}

impl CholeskyFactor {
    pub fn spec(&self) -> TileSpec {
        self.factor.spec()
    }

    /// Dense `L` with a zero strict upper triangle.
    pub fn to_dense(&self) -> Tile {
        self.factor.to_dense_lower()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub mean: Vec<f64>,
    /// Predictive variances, the diagonal of the posterior covariance.
    pub variance: Option<Vec<f64>>,
    /// Dense `M x M` posterior covariance.
    pub full_cov: Option<Tile>,
}

/// Adam rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: [f64; 3],
    pub v: [f64; 3],
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self { step: 0, m: [0.0; 3], v: [0.0; 3], config }
    }
}

/// One bias-corrected Adam update of `params` along `grad`.
pub fn adam_step(state: &AdamState, grad: [f64; 3], params: [f64; 3]) -> (AdamState, [f64; 3]) {
    let c = state.config;
    let step = state.step + 1;
    let mut next = AdamState { step, m: state.m, v: state.v, config: c };
    let bias1 = 1.0 - c.beta1.powi(step as i32);
    let bias2 = 1.0 - c.beta2.powi(step as i32);
    let mut out = params;
    for k in 0..3 {
        next.m[k] = c.beta1 * state.m[k] + (1.0 - c.beta1) * grad[k];
        next.v[k] = c.beta2 * state.v[k] + (1.0 - c.beta2) * grad[k] * grad[k];
        let m_hat = next.m[k] / bias1;
        let v_hat = next.v[k] / bias2;
        out[k] = params[k] - c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
    }
    (next, out)
}

/// `ln(1 + e^x)`, the map from unconstrained to positive parameters.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeResult {
    pub theta: Hyperparameters,
    /// Loss at the start of every iteration, before its update.
    pub loss_trace: Vec<f64>,
}

/// Engine-wide settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub workers: usize,
    /// Tiles per dimension for the training side. The test side uses the same
    /// count, capped at the number of test points.
    pub tiles_per_dim: usize,
    pub backend: BackendId,
    pub trace: bool,
    /// Add the noise variance to the test prior covariance.
    pub noisy_prior: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            tiles_per_dim: 1,
            backend: BackendId::Reference,
            trace: false,
            noisy_prior: false,
        }
    }
}

/// Owns a worker pool and a BLAS backend; runs the GP pipelines on them.
///
/// Operations take `&self` but are not meant to be interleaved from several
/// threads on one engine.
#[derive(Debug)]
pub struct GpEngine {
    runtime: Option<Runtime>,
    blas: Blas,
    config: EngineConfig,
}

impl GpEngine {
    /// Builds the engine and starts its pool.
    pub fn new(config: EngineConfig) -> Result<Self> {
        let mut engine = Self { runtime: None, blas: Blas::new(config.backend)?, config };
        engine.start_pool(PoolConfig::new(config.workers).with_trace(config.trace))?;
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn blas(&self) -> Blas {
        self.blas
    }

    pub fn set_tiles_per_dim(&mut self, tiles: usize) {
        self.config.tiles_per_dim = tiles;
    }

    pub fn start_pool(&mut self, cfg: PoolConfig) -> Result<()> {
        if self.runtime.is_some() {
            return Err(Error::PoolAlreadyStarted);
        }
        self.runtime = Some(Runtime::start(cfg)?);
        self.config.workers = cfg.workers;
        self.config.trace = cfg.trace;
        Ok(())
    }

    /// Joins the workers and returns the pool's counters.
    pub fn shutdown(&mut self) -> Result<RunStats> {
        let rt = self.runtime.take().ok_or(Error::PoolNotStarted)?;
        Ok(rt.shutdown())
    }

    pub fn runtime(&self) -> Result<&Runtime> {
        self.runtime.as_ref().ok_or(Error::PoolNotStarted)
    }

    pub fn train_spec(&self, n: usize) -> Result<TileSpec> {
        TileSpec::new(n, self.config.tiles_per_dim)
    }

    pub fn test_spec(&self, m: usize) -> Result<TileSpec> {
        TileSpec::new(m, self.config.tiles_per_dim.min(m.max(1)))
    }

    // ---- graph builders -------------------------------------------------

    fn assemble_covariance_graph(&self, train: &Arc<Dataset>, theta: Hyperparameters, spec: TileSpec) -> Result<Vec<TileF>> {
        let rt = self.runtime()?;
        let t = spec.tiles_per_dim();
        let mut tiles = Vec::with_capacity(t * (t + 1) / 2);
        for i in 0..t {
            for j in 0..=i {
                let data = Arc::clone(train);
                tiles.push(rt.dataflow(label("assemble_k", &[i, j]), (), move |_| {
                    kernels::assemble_cov_tile(&data, &theta, i, j, &spec)
                }));
            }
        }
        Ok(tiles)
    }

    fn cholesky_graph(&self, spec: TileSpec, mut tiles: Vec<TileF>) -> Result<Vec<TileF>> {
        let rt = self.runtime()?;
        let blas = self.blas;
        let t = spec.tiles_per_dim();
        let b = spec.tile_size();
        for k in 0..t {
            tiles[packed(k, k)] = rt.dataflow(label("potrf", &[k, k]), tiles[packed(k, k)].clone(), move |a| {
                blas.potrf(&a).map_err(|e| match e {
                    Error::NotPositiveDefinite { pivot, .. } => {
                        Error::NotPositiveDefinite { tile: Some(k), pivot: k * b + pivot }
                    }
                    other => other,
                })
            });
            for i in k + 1..t {
                let deps = (tiles[packed(k, k)].clone(), tiles[packed(i, k)].clone());
                tiles[packed(i, k)] = rt.dataflow(label("trsm", &[i, k]), deps, move |(l, a)| {
                    blas.trsm_right_lower_transpose(&l, &a)
                });
            }
            for i in k + 1..t {
                let deps = (tiles[packed(i, i)].clone(), tiles[packed(i, k)].clone());
                tiles[packed(i, i)] = rt.dataflow(label("syrk", &[i, i, k]), deps, move |(c, a)| {
                    blas.syrk_lower(&c, &a)
                });
                for j in k + 1..i {
                    let deps = (
                        tiles[packed(i, j)].clone(),
                        tiles[packed(i, k)].clone(),
                        tiles[packed(j, k)].clone(),
                    );
                    tiles[packed(i, j)] = rt.dataflow(label("gemm", &[i, j, k]), deps, move |(c, a, bt)| {
                        blas.gemm_update(&c, &a, &bt)
                    });
                }
            }
        }
        Ok(tiles)
    }

    fn forward_graph(&self, spec: TileSpec, l: &[TileF], mut rhs: Vec<SegF>) -> Result<Vec<SegF>> {
        let rt = self.runtime()?;
        let blas = self.blas;
        let t = spec.tiles_per_dim();
        for k in 0..t {
            let valid = spec.valid_len(k);
            rhs[k] = rt.dataflow(label("trsv", &[k]), (l[packed(k, k)].clone(), rhs[k].clone()), move |(l, x)| {
                let mut x = x.to_vec();
                x[valid..].fill(0.0);
                blas.trsv_forward(&l, &x)
            });
            for i in k + 1..t {
                let deps = (rhs[i].clone(), l[packed(i, k)].clone(), rhs[k].clone());
                rhs[i] = rt.dataflow(label("gemv", &[i, k]), deps, move |(y, a, x)| {
                    blas.gemv_update(&y, &a, &x, Transpose::No, -1.0)
                });
            }
        }
        Ok(rhs)
    }

    fn backward_graph(&self, spec: TileSpec, l: &[TileF], mut rhs: Vec<SegF>) -> Result<Vec<SegF>> {
        let rt = self.runtime()?;
        let blas = self.blas;
        let t = spec.tiles_per_dim();
        for k in (0..t).rev() {
            let valid = spec.valid_len(k);
            rhs[k] = rt.dataflow(label("trsv_t", &[k]), (l[packed(k, k)].clone(), rhs[k].clone()), move |(l, x)| {
                let mut x = x.to_vec();
                x[valid..].fill(0.0);
                blas.trsv_backward(&l, &x)
            });
            for i in (0..k).rev() {
                let deps = (rhs[i].clone(), l[packed(k, i)].clone(), rhs[k].clone());
                rhs[i] = rt.dataflow(label("gemv_t", &[i, k]), deps, move |(y, a, x)| {
                    blas.gemv_update(&y, &a, &x, Transpose::Yes, -1.0)
                });
            }
        }
        Ok(rhs)
    }

    /// Solves `W L^T = B` for every row block of the `row_tiles x T` panel
    /// `b` (row-major grid). Row block `i` starts at column block
    /// `first_col(i)`; blocks left of it are taken to be zero and get no
    /// tasks.
    fn panel_graph(
        &self,
        row_spec: TileSpec,
        col_spec: TileSpec,
        l: &[TileF],
        mut b: Vec<TileF>,
        first_col: impl Fn(usize) -> usize,
    ) -> Result<Vec<TileF>> {
        let rt = self.runtime()?;
        let blas = self.blas;
        let (tr, tc) = (row_spec.tiles_per_dim(), col_spec.tiles_per_dim());
        for i in 0..tr {
            let valid_rows = row_spec.valid_len(i);
            for k in first_col(i)..tc {
                let valid_cols = col_spec.valid_len(k);
                let deps = (l[packed(k, k)].clone(), b[i * tc + k].clone());
                b[i * tc + k] = rt.dataflow(label("trsm_panel", &[i, k]), deps, move |(l, rhs)| {
                    let mut rhs = (*rhs).clone();
                    mask_tile(&mut rhs, valid_rows, valid_cols);
                    blas.trsm_right_lower_transpose(&l, &rhs)
                });
                for j in k + 1..tc {
                    let deps = (b[i * tc + j].clone(), b[i * tc + k].clone(), l[packed(j, k)].clone());
                    b[i * tc + j] = rt.dataflow(label("gemm_panel", &[i, j, k]), deps, move |(c, w, lt)| {
                        blas.gemm_update(&c, &w, &lt)
                    });
                }
            }
        }
        Ok(b)
    }

    fn cross_graph(
        &self,
        test: &Arc<Dataset>,
        train: &Arc<Dataset>,
        theta: Hyperparameters,
        test_spec: TileSpec,
        train_spec: TileSpec,
    ) -> Result<Vec<TileF>> {
        let rt = self.runtime()?;
        let mut tiles = Vec::new();
        for i in 0..test_spec.tiles_per_dim() {
            for j in 0..train_spec.tiles_per_dim() {
                let (te, tr) = (Arc::clone(test), Arc::clone(train));
                tiles.push(rt.dataflow(label("assemble_cross", &[i, j]), (), move |_| {
                    kernels::assemble_cross_tile(&te, &tr, &theta, i, j, &test_spec, &train_spec)
                }));
            }
        }
        Ok(tiles)
    }

    fn ready_segments(spec: TileSpec, values: &[f64]) -> Result<Vec<SegF>> {
        Ok(TiledVector::scatter(spec, values)?
            .into_segments()
            .into_iter()
            .map(TaskFuture::ready)
            .collect())
    }

    /// Factor and `alpha = K^-1 y` for a training set.
    fn factor_and_alpha(
        &self,
        train: &Arc<Dataset>,
        theta: Hyperparameters,
        spec: TileSpec,
    ) -> Result<(Vec<TileF>, Vec<SegF>, Vec<SegF>)> {
        let k = self.assemble_covariance_graph(train, theta, spec)?;
        let l = self.cholesky_graph(spec, k)?;
        let y = Self::ready_segments(spec, train.targets())?;
        let z = self.forward_graph(spec, &l, y)?;
        let alpha = self.backward_graph(spec, &l, z.clone())?;
        Ok((l, z, alpha))
    }

    fn mean_graph(&self, test_spec: TileSpec, train_spec: TileSpec, cross: &[TileF], alpha: &[SegF]) -> Result<Vec<SegF>> {
        let rt = self.runtime()?;
        let blas = self.blas;
        let tc = train_spec.tiles_per_dim();
        let mb = test_spec.tile_size();
        let mut out = Vec::with_capacity(test_spec.tiles_per_dim());
        for i in 0..test_spec.tiles_per_dim() {
            let mut acc: SegF = TaskFuture::ready(vec![0.0; mb]);
            for j in 0..tc {
                let deps = (acc, cross[i * tc + j].clone(), alpha[j].clone());
                acc = rt.dataflow(label("gemv_mean", &[i, j]), deps, move |(y, a, x)| {
                    blas.gemv_update(&y, &a, &x, Transpose::No, 1.0)
                });
            }
            out.push(acc);
        }
        Ok(out)
    }

    // ---- public operations ----------------------------------------------

    /// Assembles the training covariance `K(theta)` into tiles.
    pub fn assemble_covariance(&self, train: &Dataset, theta: &Hyperparameters) -> Result<TiledSymmetricMatrix> {
        let spec = self.train_spec(train.n())?;
        let tiles = self.assemble_covariance_graph(&Arc::new(train.clone()), *theta, spec)?;
        collect_symmetric(spec, &tiles)
    }

    /// Tiled right-looking Cholesky of an assembled matrix.
    pub fn tiled_cholesky(&self, k: &TiledSymmetricMatrix) -> Result<CholeskyFactor> {
        let spec = k.spec();
        let tiles = k.tiles().iter().cloned().map(TaskFuture::ready).collect();
        let l = self.cholesky_graph(spec, tiles)?;
        Ok(CholeskyFactor { factor: collect_symmetric(spec, &l)?, theta_used: None })
    }

    /// Assembles and factorizes `K(theta)` in one graph.
    pub fn factorize(&self, train: &Dataset, theta: &Hyperparameters) -> Result<CholeskyFactor> {
        let spec = self.train_spec(train.n())?;
        let k = self.assemble_covariance_graph(&Arc::new(train.clone()), *theta, spec)?;
        let l = self.cholesky_graph(spec, k)?;
        Ok(CholeskyFactor { factor: collect_symmetric(spec, &l)?, theta_used: Some(*theta) })
    }

    fn factor_futures(l: &CholeskyFactor) -> Vec<TileF> {
        l.factor.tiles().iter().cloned().map(TaskFuture::ready).collect()
    }

    fn check_vector_spec(l: &CholeskyFactor, b: &TiledVector) -> Result<()> {
        if b.spec() != l.spec() {
            return Err(Error::ShapeMismatch {
                op: "substitution",
                detail: format!("vector tiling {:?} vs factor tiling {:?}", b.spec(), l.spec()),
            });
        }
        Ok(())
    }

    /// Solves `L z = b`.
    pub fn forward_substitution(&self, l: &CholeskyFactor, b: &TiledVector) -> Result<TiledVector> {
        Self::check_vector_spec(l, b)?;
        let rhs = b.segments().iter().cloned().map(TaskFuture::ready).collect();
        let z = self.forward_graph(l.spec(), &Self::factor_futures(l), rhs)?;
        collect_vector(l.spec(), &z)
    }

    /// Solves `L^T x = b`.
    pub fn backward_substitution(&self, l: &CholeskyFactor, b: &TiledVector) -> Result<TiledVector> {
        Self::check_vector_spec(l, b)?;
        let rhs = b.segments().iter().cloned().map(TaskFuture::ready).collect();
        let x = self.backward_graph(l.spec(), &Self::factor_futures(l), rhs)?;
        collect_vector(l.spec(), &x)
    }

    /// `K^-1 b` through both triangular solves.
    pub fn solve(&self, l: &CholeskyFactor, b: &TiledVector) -> Result<TiledVector> {
        Self::check_vector_spec(l, b)?;
        let lf = Self::factor_futures(l);
        let rhs = b.segments().iter().cloned().map(TaskFuture::ready).collect();
        let z = self.forward_graph(l.spec(), &lf, rhs)?;
        let x = self.backward_graph(l.spec(), &lf, z)?;
        collect_vector(l.spec(), &x)
    }

    /// Triangular solve against a panel whose columns follow the factor's
    /// tiling. `b` holds `B^T` (one row per right-hand side), and the result
    /// holds `V^T` where `L V = B`, i.e. `W` with `W L^T = b`.
    pub fn panel_forward_substitution(&self, l: &CholeskyFactor, b: &TiledPanel) -> Result<TiledPanel> {
        if b.col_spec() != l.spec() {
            return Err(Error::ShapeMismatch {
                op: "panel_forward_substitution",
                detail: format!("panel columns {:?} vs factor {:?}", b.col_spec(), l.spec()),
            });
        }
        let tiles = b.tiles().iter().cloned().map(TaskFuture::ready).collect();
        let w = self.panel_graph(b.row_spec(), l.spec(), &Self::factor_futures(l), tiles, |_| 0)?;
        let w = wait_all(&w)?.into_iter().map(unwrap_arc).collect();
        TiledPanel::from_tiles(b.row_spec(), l.spec(), w)
    }

    fn prepare(&self, train: &Dataset, test: &Dataset) -> Result<(Arc<Dataset>, Arc<Dataset>, TileSpec, TileSpec)> {
        if train.n() == 0 || test.n() == 0 {
            return Err(Error::InvalidConfig("prediction needs at least one train and one test point".into()));
        }
        if train.d() != test.d() {
            return Err(Error::DimensionMismatch { expected: train.d(), found: test.d() });
        }
        Ok((
            Arc::new(train.clone()),
            Arc::new(test.clone()),
            self.train_spec(train.n())?,
            self.test_spec(test.n())?,
        ))
    }

    /// Posterior mean `K_cross K^-1 y`.
    pub fn predict(&self, train: &Dataset, test: &Dataset, theta: &Hyperparameters) -> Result<PredictionResult> {
        let (train, test, spec, tspec) = self.prepare(train, test)?;
        let (_, _, alpha) = self.factor_and_alpha(&train, *theta, spec)?;
        let cross = self.cross_graph(&test, &train, *theta, tspec, spec)?;
        let mean = self.mean_graph(tspec, spec, &cross, &alpha)?;
        Ok(PredictionResult { mean: collect_vector(tspec, &mean)?.gather(), variance: None, full_cov: None })
    }

    /// Posterior mean and per-point predictive variance.
    pub fn predict_with_uncertainty(&self, train: &Dataset, test: &Dataset, theta: &Hyperparameters) -> Result<PredictionResult> {
        let (train, test, spec, tspec) = self.prepare(train, test)?;
        let rt = self.runtime()?;
        let blas = self.blas;
        let (l, _, alpha) = self.factor_and_alpha(&train, *theta, spec)?;
        let cross = self.cross_graph(&test, &train, *theta, tspec, spec)?;
        let mean = self.mean_graph(tspec, spec, &cross, &alpha)?;
        let w = self.panel_graph(tspec, spec, &l, cross, |_| 0)?;

        let tc = spec.tiles_per_dim();
        let theta = *theta;
        let noisy = self.config.noisy_prior;
        let mut variance = Vec::with_capacity(tspec.tiles_per_dim());
        for i in 0..tspec.tiles_per_dim() {
            let data = Arc::clone(&test);
            let mut acc: SegF = rt.dataflow(label("prior_diag", &[i]), (), move |_| {
                prior_diagonal(&data, &theta, i, &tspec, noisy)
            });
            for k in 0..tc {
                acc = rt.dataflow(label("row_norms", &[i, k]), (acc, w[i * tc + k].clone()), move |(v, w)| {
                    let mut v = v.to_vec();
                    for (r, vr) in v.iter_mut().enumerate() {
                        *vr -= blas.dot(w.row(r), w.row(r))?;
                    }
                    Ok(v)
                });
            }
            variance.push(acc);
        }
        Ok(PredictionResult {
            mean: collect_vector(tspec, &mean)?.gather(),
            variance: Some(collect_vector(tspec, &variance)?.gather()),
            full_cov: None,
        })
    }

    /// Posterior mean and full posterior covariance.
    pub fn predict_full_cov(&self, train: &Dataset, test: &Dataset, theta: &Hyperparameters) -> Result<PredictionResult> {
        let (train, test, spec, tspec) = self.prepare(train, test)?;
        let rt = self.runtime()?;
        let blas = self.blas;
        let (l, _, alpha) = self.factor_and_alpha(&train, *theta, spec)?;
        let cross = self.cross_graph(&test, &train, *theta, tspec, spec)?;
        let mean = self.mean_graph(tspec, spec, &cross, &alpha)?;
        let w = self.panel_graph(tspec, spec, &l, cross, |_| 0)?;

        let tm = tspec.tiles_per_dim();
        let tc = spec.tiles_per_dim();
        let theta = *theta;
        let noisy = self.config.noisy_prior;
        let mut sigma = Vec::with_capacity(tm * (tm + 1) / 2);
        for i in 0..tm {
            for j in 0..=i {
                let data = Arc::clone(&test);
                let mut acc: TileF = rt.dataflow(label("assemble_prior", &[i, j]), (), move |_| {
                    kernels::assemble_prior_tile(&data, &theta, i, j, &tspec, noisy)
                });
                for k in 0..tc {
                    acc = if i == j {
                        rt.dataflow(label("syrk_cov", &[i, i, k]), (acc, w[i * tc + k].clone()), move |(c, a)| {
                            blas.syrk_lower(&c, &a)
                        })
                    } else {
                        let deps = (acc, w[i * tc + k].clone(), w[j * tc + k].clone());
                        rt.dataflow(label("gemm_cov", &[i, j, k]), deps, move |(c, a, b)| {
                            blas.gemm_update(&c, &a, &b)
                        })
                    };
                }
                sigma.push(acc);
            }
        }
        let sigma = collect_symmetric(tspec, &sigma)?.to_dense();
        let variance = (0..sigma.rows()).map(|r| sigma.get(r, r)).collect();
        Ok(PredictionResult {
            mean: collect_vector(tspec, &mean)?.gather(),
            variance: Some(variance),
            full_cov: Some(sigma),
        })
    }

    /// Builds `(loss, z)` tasks on top of a factor graph.
    fn loss_graph(&self, spec: TileSpec, l: &[TileF], z: &[SegF]) -> Result<ScalarF> {
        let rt = self.runtime()?;
        let blas = self.blas;
        let t = spec.tiles_per_dim();
        let mut parts: Vec<TaskFuture<(f64, f64)>> = Vec::with_capacity(t);
        for k in 0..t {
            let valid = spec.valid_len(k);
            let deps = (l[packed(k, k)].clone(), z[k].clone());
            parts.push(rt.dataflow(label("loss_part", &[k]), deps, move |(l, z)| {
                let mut logdet = 0.0;
                for r in 0..valid {
                    logdet += l.get(r, r).ln();
                }
                Ok((logdet, blas.dot(&z, &z)?))
            }));
        }
        let n = spec.n_total() as f64;
        Ok(rt.dataflow(label("loss_reduce", &[]), parts, move |parts| {
            let (mut half_logdet, mut quad) = (0.0, 0.0);
            for p in &parts {
                half_logdet += p.0;
                quad += p.1;
            }
            Ok(half_logdet + 0.5 * quad + 0.5 * n * (2.0 * PI).ln())
        }))
    }

    /// Gradient tasks: `0.5 tr(K^-1 dK) - 0.5 alpha^T dK alpha` for each
    /// hyperparameter.
    fn gradient_graph(
        &self,
        train: &Arc<Dataset>,
        theta: Hyperparameters,
        spec: TileSpec,
        l: &[TileF],
        alpha: &[SegF],
    ) -> Result<TaskFuture<[f64; 3]>> {
        let rt = self.runtime()?;
        let blas = self.blas;
        let t = spec.tiles_per_dim();
        let b = spec.tile_size();

        // W = L^-T, upper block-triangular: row block i only has k >= i.
        let identity: Vec<TileF> = (0..t * t)
            .map(|idx| {
                let (i, k) = (idx / t, idx % t);
                TaskFuture::ready(if i == k { Tile::identity(b) } else { Tile::zeros(b, b) })
            })
            .collect();
        let w = self.panel_graph(spec, spec, l, identity, |i| i)?;

        // K^-1 = W W^T, lower tiles; W[j][k] vanishes for k < j <= i.
        let mut parts: Vec<TaskFuture<[f64; 6]>> = Vec::with_capacity(t * (t + 1) / 2);
        for i in 0..t {
            for j in 0..=i {
                let mut acc: TileF = TaskFuture::ready(Tile::zeros(b, b));
                for k in i..t {
                    let deps = (acc, w[i * t + k].clone(), w[j * t + k].clone());
                    acc = rt.dataflow(label("gemm_kinv", &[i, j, k]), deps, move |(c, a, bt)| {
                        blas.gemm_full(&c, &a, Transpose::No, &bt, Transpose::Yes, 1.0)
                    });
                }
                let data = Arc::clone(train);
                let deps = (acc, alpha[i].clone(), alpha[j].clone());
                parts.push(rt.dataflow(label("grad_part", &[i, j]), deps, move |(kinv, ai, aj)| {
                    let grads = kernels::grad_tiles(&data, &theta, i, j, &spec)?;
                    let weight = if i == j { 1.0 } else { 2.0 };
                    let (vi, vj) = (spec.valid_len(i), spec.valid_len(j));
                    let mut out = [0.0; 6];
                    for (h, g) in grads.iter().enumerate() {
                        let (mut trace, mut quad) = (0.0, 0.0);
                        for r in 0..vi {
                            for c in 0..vj {
                                let gv = g.get(r, c);
                                trace += kinv.get(r, c) * gv;
                                quad += ai[r] * gv * aj[c];
                            }
                        }
                        out[h] = weight * trace;
                        out[3 + h] = weight * quad;
                    }
                    Ok(out)
                }));
            }
        }
        Ok(rt.dataflow(label("grad_reduce", &[]), parts, |parts| {
            let mut sums = [0.0; 6];
            for p in &parts {
                for (s, v) in sums.iter_mut().zip(p.iter()) {
                    *s += v;
                }
            }
            Ok([
                0.5 * sums[0] - 0.5 * sums[3],
                0.5 * sums[1] - 0.5 * sums[4],
                0.5 * sums[2] - 0.5 * sums[5],
            ])
        }))
    }

    /// Negative log marginal likelihood
    /// `0.5 log|K| + 0.5 y^T K^-1 y + (N/2) log(2 pi)`.
    pub fn nlml(&self, train: &Dataset, theta: &Hyperparameters) -> Result<f64> {
        let spec = self.train_spec(train.n())?;
        let train = Arc::new(train.clone());
        let k = self.assemble_covariance_graph(&train, *theta, spec)?;
        let l = self.cholesky_graph(spec, k)?;
        let y = Self::ready_segments(spec, train.targets())?;
        let z = self.forward_graph(spec, &l, y)?;
        Ok(*self.loss_graph(spec, &l, &z)?.wait()?)
    }

    /// Gradient of the loss with respect to `(l, nu, sigma^2)`.
    pub fn nlml_gradient(&self, train: &Dataset, theta: &Hyperparameters) -> Result<[f64; 3]> {
        Ok(self.nlml_and_gradient(train, theta)?.1)
    }

    /// Loss and gradient from one shared factorization.
    pub fn nlml_and_gradient(&self, train: &Dataset, theta: &Hyperparameters) -> Result<(f64, [f64; 3])> {
        let spec = self.train_spec(train.n())?;
        let train = Arc::new(train.clone());
        let (l, z, alpha) = self.factor_and_alpha(&train, *theta, spec)?;
        let loss = self.loss_graph(spec, &l, &z)?;
        let grad = self.gradient_graph(&train, *theta, spec, &l, &alpha)?;
        let grad = grad.wait();
        Ok((*loss.wait()?, *grad?))
    }

    /// Adam on softplus-unconstrained hyperparameters. The loss trace holds
    /// the loss at the start of each iteration.
    pub fn optimize(
        &self,
        train: &Dataset,
        theta0: &Hyperparameters,
        iters: usize,
        adam: AdamConfig,
    ) -> Result<OptimizeResult> {
        if iters == 0 {
            return Err(Error::InvalidConfig("optimization needs at least one iteration".into()));
        }
        if theta0.noise_variance() <= 0.0 {
            return Err(Error::InvalidHyperparameter { name: "noise_variance", value: theta0.noise_variance() });
        }
        let mut raw = theta0.to_array().map(softplus_inverse);
        let mut theta = *theta0;
        let mut state = AdamState::new(adam);
        let mut loss_trace = Vec::with_capacity(iters);
        for iteration in 0..iters {
            let (loss, grad) = self
                .nlml_and_gradient(train, &theta)
                .map_err(|e| Error::Optimization { iteration, source: Box::new(e) })?;
            loss_trace.push(loss);
            let mut raw_grad = [0.0; 3];
            for k in 0..3 {
                raw_grad[k] = grad[k] * sigmoid(raw[k]);
            }
            let (next, updated) = adam_step(&state, raw_grad, raw);
            state = next;
            raw = updated;
            theta = Hyperparameters::from_array(raw.map(softplus))
                .map_err(|e| Error::Optimization { iteration, source: Box::new(e) })?;
        }
        Ok(OptimizeResult { theta, loss_trace })
    }
}

fn unwrap_arc<T: Clone>(a: Arc<T>) -> T {
    Arc::try_unwrap(a).unwrap_or_else(|a| (*a).clone())
}

fn collect_symmetric(spec: TileSpec, tiles: &[TileF]) -> Result<TiledSymmetricMatrix> {
    let tiles = wait_all(tiles)?.into_iter().map(unwrap_arc).collect();
    TiledSymmetricMatrix::from_tiles(spec, tiles)
}

fn collect_vector(spec: TileSpec, segs: &[SegF]) -> Result<TiledVector> {
    let segs = wait_all(segs)?.into_iter().map(unwrap_arc).collect();
    TiledVector::from_segments(spec, segs)
}

fn mask_tile(t: &mut Tile, valid_rows: usize, valid_cols: usize) {
    if valid_rows == t.rows() && valid_cols == t.cols() {
        return;
    }
    for r in 0..t.rows() {
        for c in 0..t.cols() {
            if r >= valid_rows || c >= valid_cols {
                t.set(r, c, 0.0);
            }
        }
    }
}

fn prior_diagonal(test: &Dataset, theta: &Hyperparameters, i: usize, spec: &TileSpec, noisy: bool) -> Result<Vec<f64>> {
    let mut out = vec![0.0; spec.tile_size()];
    for (r, v) in out.iter_mut().enumerate().take(spec.valid_len(i)) {
        let z = test.point(spec.global(i, r));
        *v = kernels::se_kernel(z, z, theta, noisy)?;
    }
    Ok(out)
}
