//! Squared exponential kernel and tile assembly.
//!
//! `k(z_i, z_j) = nu * exp(-|z_i - z_j|^2 / (2 l^2)) + delta_ij * sigma^2`
//!
//! The noise term only applies to a sample paired with itself, so it shows up
//! on the diagonal of the training covariance and nowhere else.

use std::fmt;

use crate::error::{Error, Result};
use crate::tiled_matrix::{Tile, TileSpec};

/// Kernel hyperparameters `(l, nu, sigma^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyperparameters {
    length_scale: f64,
    signal_variance: f64,
    noise_variance: f64,
}

impl Hyperparameters {
    pub fn new(length_scale: f64, signal_variance: f64, noise_variance: f64) -> Result<Self> {
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::InvalidHyperparameter { name: "length_scale", value: length_scale });
        }
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(Error::InvalidHyperparameter { name: "signal_variance", value: signal_variance });
        }
        if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
            return Err(Error::InvalidHyperparameter { name: "noise_variance", value: noise_variance });
        }
        Ok(Self { length_scale, signal_variance, noise_variance })
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.length_scale, self.signal_variance, self.noise_variance]
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self { length_scale: 1.0, signal_variance: 1.0, noise_variance: 0.1 }
    }
}

impl fmt::Display for Hyperparameters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "l={:.6} nu={:.6} sigma2={:.6}",
            self.length_scale, self.signal_variance, self.noise_variance
        )
    }
}

/// Selects one hyperparameter when differentiating the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperparamId {
    LengthScale,
    SignalVariance,
    NoiseVariance,
}

impl HyperparamId {
    pub const ALL: [HyperparamId; 3] =
        [HyperparamId::LengthScale, HyperparamId::SignalVariance, HyperparamId::NoiseVariance];
}

/// Feature matrix (row-major, `n x d`) with one observation per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    targets: Vec<f64>,
    d: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, targets: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidConfig("feature dimension must be at least 1".into()));
        }
        if features.len() != targets.len() * d {
            return Err(Error::DimensionMismatch { expected: targets.len() * d, found: features.len() });
        }
        Ok(Self { features, targets, d })
    }

    /// Inputs without observations (all targets zero).
    pub fn from_features(features: Vec<f64>, d: usize) -> Result<Self> {
        let n = if d == 0 { 0 } else { features.len() / d };
        Self::new(features, vec![0.0; n], d)
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Rows `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            features: self.features[range.start * self.d..range.end * self.d].to_vec(),
            targets: self.targets[range].to_vec(),
            d: self.d,
        }
    }
}

/// Squared Euclidean distance, accumulated in ascending dimension order.
#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.len() {
        let t = a[k] - b[k];
        acc += t * t;
    }
    acc
}

#[inline]
fn correlation(dist2: f64, theta: &Hyperparameters) -> f64 {
    let l = theta.length_scale;
    (-dist2 / (2.0 * l * l)).exp()
}

/// Kernel value for one pair; `same_index` is the Kronecker delta.
pub fn se_kernel(zi: &[f64], zj: &[f64], theta: &Hyperparameters, same_index: bool) -> Result<f64> {
    if zi.len() != zj.len() {
        return Err(Error::DimensionMismatch { expected: zi.len(), found: zj.len() });
    }
    let noise = if same_index { theta.noise_variance } else { 0.0 };
    Ok(theta.signal_variance * correlation(sq_dist(zi, zj), theta) + noise)
}

fn check_lower(i: usize, j: usize, spec: &TileSpec) -> Result<()> {
    if i >= spec.tiles_per_dim() || j > i {
        return Err(Error::TileIndex { i, j, tiles: spec.tiles_per_dim() });
    }
    Ok(())
}

fn check_spec(data: &Dataset, spec: &TileSpec) -> Result<()> {
    if data.n() != spec.n_total() {
        return Err(Error::DimensionMismatch { expected: spec.n_total(), found: data.n() });
    }
    Ok(())
}

/// Symmetric tile over one sample set. Padding carries an identity block on
/// the diagonal and zeros elsewhere.
fn symmetric_tile(
    data: &Dataset,
    theta: &Hyperparameters,
    noise: f64,
    i: usize,
    j: usize,
    spec: &TileSpec,
) -> Result<Tile> {
    check_spec(data, spec)?;
    check_lower(i, j, spec)?;
    let b = spec.tile_size();
    let (vi, vj) = (spec.valid_len(i), spec.valid_len(j));
    let mut tile = Tile::zeros(b, b);
    for r in 0..b {
        for c in 0..b {
            let v = if r < vi && c < vj {
                let (gr, gc) = (spec.global(i, r), spec.global(j, c));
                let base = theta.signal_variance * correlation(sq_dist(data.point(gr), data.point(gc)), theta);
                if gr == gc {
                    base + noise
                } else {
                    base
                }
            } else if i == j && r == c {
                1.0
            } else {
                0.0
            };
            tile.set(r, c, v);
        }
    }
    Ok(tile)
}

/// Training covariance tile `K[i][j]`, `i >= j`.
pub fn assemble_cov_tile(train: &Dataset, theta: &Hyperparameters, i: usize, j: usize, spec: &TileSpec) -> Result<Tile> {
    symmetric_tile(train, theta, theta.noise_variance, i, j, spec)
}

/// Prior covariance tile over the test inputs. The latent-function convention
/// omits the noise term; `noisy` adds it back.
pub fn assemble_prior_tile(
    test: &Dataset,
    theta: &Hyperparameters,
    i: usize,
    j: usize,
    spec: &TileSpec,
    noisy: bool,
) -> Result<Tile> {
    let noise = if noisy { theta.noise_variance } else { 0.0 };
    symmetric_tile(test, theta, noise, i, j, spec)
}

/// Cross-covariance tile between test tile `i` and train tile `j`. No noise
/// term; padding is zero.
pub fn assemble_cross_tile(
    test: &Dataset,
    train: &Dataset,
    theta: &Hyperparameters,
    i: usize,
    j: usize,
    test_spec: &TileSpec,
    train_spec: &TileSpec,
) -> Result<Tile> {
    if test.d() != train.d() {
        return Err(Error::DimensionMismatch { expected: train.d(), found: test.d() });
    }
    check_spec(test, test_spec)?;
    check_spec(train, train_spec)?;
    if i >= test_spec.tiles_per_dim() || j >= train_spec.tiles_per_dim() {
        return Err(Error::TileIndex { i, j, tiles: test_spec.tiles_per_dim().max(train_spec.tiles_per_dim()) });
    }
    let (vi, vj) = (test_spec.valid_len(i), train_spec.valid_len(j));
    let mut tile = Tile::zeros(test_spec.tile_size(), train_spec.tile_size());
    for r in 0..vi {
        let zr = test.point(test_spec.global(i, r));
        for c in 0..vj {
            let zc = train.point(train_spec.global(j, c));
            tile.set(r, c, theta.signal_variance * correlation(sq_dist(zr, zc), theta));
        }
    }
    Ok(tile)
}

/// Elementwise partial derivative of `K[i][j]` with respect to `which`.
/// Padding is zero, including on diagonal tiles.
pub fn grad_tile(
    train: &Dataset,
    theta: &Hyperparameters,
    which: HyperparamId,
    i: usize,
    j: usize,
    spec: &TileSpec,
) -> Result<Tile> {
    check_spec(train, spec)?;
    check_lower(i, j, spec)?;
    let b = spec.tile_size();
    let (vi, vj) = (spec.valid_len(i), spec.valid_len(j));
    let l = theta.length_scale;
    let mut tile = Tile::zeros(b, b);
    for r in 0..vi {
        let gr = spec.global(i, r);
        for c in 0..vj {
            let gc = spec.global(j, c);
            let v = match which {
                HyperparamId::NoiseVariance => {
                    if gr == gc {
                        1.0
                    } else {
                        0.0
                    }
                }
                HyperparamId::SignalVariance => correlation(sq_dist(train.point(gr), train.point(gc)), theta),
                HyperparamId::LengthScale => {
                    let d2 = sq_dist(train.point(gr), train.point(gc));
                    theta.signal_variance * correlation(d2, theta) * d2 / (l * l * l)
                }
            };
            tile.set(r, c, v);
        }
    }
    Ok(tile)
}

/// The three gradient tiles of one block in a single pass, ordered
/// `(l, nu, sigma^2)`. Used by the fused loss/gradient graph.
pub fn grad_tiles(train: &Dataset, theta: &Hyperparameters, i: usize, j: usize, spec: &TileSpec) -> Result<[Tile; 3]> {
    Ok([
        grad_tile(train, theta, HyperparamId::LengthScale, i, j, spec)?,
        grad_tile(train, theta, HyperparamId::SignalVariance, i, j, spec)?,
        grad_tile(train, theta, HyperparamId::NoiseVariance, i, j, spec)?,
    ])
}
