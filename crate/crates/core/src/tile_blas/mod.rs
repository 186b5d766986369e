//! Sequential dense kernels on single tiles.
//!
//! [`Blas`] is the handle the task graphs use. It validates shapes, copies the
//! output operand and dispatches to one of two interchangeable backends:
//!
//! * `reference`: portable triple loops with a fixed accumulation order,
//! * `system`: the host OpenBLAS (feature `openblas`).
//!
//! Kernels are pure from the caller's point of view: inputs are borrowed and a
//! fresh tile or segment is returned.

mod reference;

#[cfg(feature = "openblas")]
mod openblas;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tiled_matrix::Tile;

pub use reference::Reference;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BackendId {
    Reference,
    System,
}

impl BackendId {
    pub fn is_available(self) -> bool {
        match self {
            BackendId::Reference => true,
            #[cfg(feature = "openblas")]
            BackendId::System => system_kernels().is_some(),
            #[cfg(not(feature = "openblas"))]
            BackendId::System => false,
        }
    }

    /// `system` when this build links one that passes its self-check,
    /// otherwise `reference`.
    pub fn preferred() -> Self {
        if BackendId::System.is_available() {
            BackendId::System
        } else {
            BackendId::Reference
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackendId::Reference => "reference",
            BackendId::System => "system",
        }
    }
}

impl fmt::Display for BackendId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(BackendId::Reference),
            "system" => Ok(BackendId::System),
            other => Err(Error::InvalidConfig(format!("unknown blas_backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

impl Transpose {
    #[inline]
    pub fn is_trans(self) -> bool {
        self == Transpose::Yes
    }
}

/// In-place kernel contract implemented by each backend. Shapes and
/// triangular diagonals are validated by [`Blas`] before these run.
pub trait TileKernels: Send + Sync {
    /// Lower Cholesky factor in place; strict upper triangle zeroed.
    fn potrf(&self, a: &mut Tile) -> Result<()>;
    /// `b <- b * L^-T`.
    fn trsm_right_lower_transpose(&self, l: &Tile, b: &mut Tile) -> Result<()>;
    /// `c <- c - a a^T`, lower triangle only.
    fn syrk_lower(&self, c: &mut Tile, a: &Tile) -> Result<()>;
    /// `c <- c + alpha op(a) op(b)`.
    fn gemm(&self, c: &mut Tile, a: &Tile, ta: Transpose, b: &Tile, tb: Transpose, alpha: f64) -> Result<()>;
    /// `c <- c - a b^T`.
    fn gemm_update(&self, c: &mut Tile, a: &Tile, b: &Tile) -> Result<()>;
    /// `x <- L^-1 x` or `x <- L^-T x`.
    fn trsv(&self, l: &Tile, x: &mut [f64], trans: Transpose) -> Result<()>;
    /// `y <- y + alpha op(a) x`.
    fn gemv(&self, y: &mut [f64], a: &Tile, x: &[f64], trans: Transpose, alpha: f64) -> Result<()>;
    fn dot(&self, u: &[f64], v: &[f64]) -> f64;
}

static REFERENCE: Reference = Reference;

/// The host library, loaded once and kept only if it agrees with the
/// reference kernels on a few probe problems. Some OpenBLAS builds pick
/// CPU-specific kernels that return wrong results on certain hosts; those are
/// reported unavailable rather than used.
#[cfg(feature = "openblas")]
fn system_kernels() -> Option<&'static openblas::OpenBlas> {
    static SYSTEM: std::sync::OnceLock<Option<openblas::OpenBlas>> = std::sync::OnceLock::new();
    SYSTEM
        .get_or_init(|| {
            let kernels = openblas::OpenBlas::new();
            match self_check(&kernels) {
                Ok(()) => Some(kernels),
                Err(what) => {
                    log::warn!(
                        "system BLAS disagrees with the reference kernels ({what}, core {}); \
                         disabling it. Setting OPENBLAS_CORETYPE (e.g. Haswell) may help.",
                        kernels.core_name()
                    );
                    None
                }
            }
        })
        .as_ref()
}

/// Runs every kernel on fixed probe inputs and compares with [`Reference`].
pub fn self_check(k: &dyn TileKernels) -> std::result::Result<(), String> {
    let r = &REFERENCE;
    let probe = |rows: usize, cols: usize, seed: f64| {
        Tile::from_fn(rows, cols, |i, j| ((i * 31 + j * 17) as f64 * 0.618 + seed).sin())
    };
    let spd = |n: usize| {
        let a = probe(n, n, 0.3);
        let mut c = Tile::identity(n);
        for d in c.as_mut_slice().iter_mut() {
            *d *= n as f64;
        }
        r.gemm(&mut c, &a, Transpose::No, &a, Transpose::Yes, 1.0).map(|_| c)
    };
    let agree = |what: &str, got: &[f64], want: &[f64]| {
        let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let worst = got.iter().zip(want).fold(0.0f64, |m, (g, w)| m.max((g - w).abs()));
        if worst <= 1e-9 * scale {
            Ok(())
        } else {
            Err(format!("{what}: max deviation {worst:.3e}"))
        }
    };
    let fail = |e: Error| e.to_string();

    for n in [40, 100] {
        let a = spd(n).map_err(fail)?;
        let (mut lg, mut lw) = (a.clone(), a.clone());
        k.potrf(&mut lg).map_err(fail)?;
        r.potrf(&mut lw).map_err(fail)?;
        agree("potrf", lg.as_slice(), lw.as_slice())?;

        let b = probe(n, n, 1.1);
        let (mut bg, mut bw) = (b.clone(), b.clone());
        k.trsm_right_lower_transpose(&lw, &mut bg).map_err(fail)?;
        r.trsm_right_lower_transpose(&lw, &mut bw).map_err(fail)?;
        agree("trsm", bg.as_slice(), bw.as_slice())?;

        let (mut cg, mut cw) = (a.clone(), a.clone());
        k.syrk_lower(&mut cg, &b).map_err(fail)?;
        r.syrk_lower(&mut cw, &b).map_err(fail)?;
        agree("syrk", cg.as_slice(), cw.as_slice())?;

        for trans in [Transpose::No, Transpose::Yes] {
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).cos()).collect();
            let (mut xg, mut xw) = (x.clone(), x.clone());
            k.trsv(&lw, &mut xg, trans).map_err(fail)?;
            r.trsv(&lw, &mut xw, trans).map_err(fail)?;
            agree("trsv", &xg, &xw)?;
            let (mut yg, mut yw) = (x.clone(), x.clone());
            k.gemv(&mut yg, &b, &x, trans, -1.0).map_err(fail)?;
            r.gemv(&mut yw, &b, &x, trans, -1.0).map_err(fail)?;
            agree("gemv", &yg, &yw)?;
            agree("dot", &[k.dot(&x, &yg)], &[r.dot(&x, &yw)])?;
        }
    }
    for n in [64, 256] {
        let (a, b, c) = (probe(n, n, 0.2), probe(n, n, 0.9), probe(n, n, 2.0));
        let (mut cg, mut cw) = (c.clone(), c.clone());
        k.gemm_update(&mut cg, &a, &b).map_err(fail)?;
        r.gemm_update(&mut cw, &a, &b).map_err(fail)?;
        agree("gemm", cg.as_slice(), cw.as_slice())?;
        for (ta, tb) in [(Transpose::Yes, Transpose::No), (Transpose::No, Transpose::Yes)] {
            let (mut cg, mut cw) = (c.clone(), c.clone());
            k.gemm(&mut cg, &a, ta, &b, tb, 0.5).map_err(fail)?;
            r.gemm(&mut cw, &a, ta, &b, tb, 0.5).map_err(fail)?;
            agree("gemm", cg.as_slice(), cw.as_slice())?;
        }
    }
    Ok(())
}

/// Backend handle shared by every task of an engine.
#[derive(Clone, Copy)]
pub struct Blas {
    id: BackendId,
    kernels: &'static dyn TileKernels,
}

impl fmt::Debug for Blas {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Blas").field("id", &self.id).finish()
    }
}

impl Default for Blas {
    fn default() -> Self {
        Self::reference()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn check_triangular(l: &Tile, op: &'static str) -> Result<()> {
    if !l.is_square() {
        return Err(shape_err(op, format!("triangular factor is {}x{}", l.rows(), l.cols())));
    }
    match (0..l.rows()).find(|&i| l.get(i, i) == 0.0) {
        Some(index) => Err(Error::SingularTriangular { index }),
        None => Ok(()),
    }
}

impl Blas {
    pub fn new(id: BackendId) -> Result<Self> {
        match id {
            BackendId::Reference => Ok(Self::reference()),
            #[cfg(feature = "openblas")]
            BackendId::System => match system_kernels() {
                Some(kernels) => Ok(Self { id, kernels }),
                None => Err(Error::BackendUnavailable(id)),
            },
            #[cfg(not(feature = "openblas"))]
            BackendId::System => Err(Error::BackendUnavailable(id)),
        }
    }

    pub fn reference() -> Self {
        Self { id: BackendId::Reference, kernels: &REFERENCE }
    }

    pub fn id(&self) -> BackendId {
        self.id
    }

    pub fn potrf(&self, a: &Tile) -> Result<Tile> {
        if !a.is_square() {
            return Err(shape_err("potrf", format!("{}x{} tile", a.rows(), a.cols())));
        }
        let mut out = a.clone();
        self.kernels.potrf(&mut out)?;
        Ok(out)
    }

    /// Solves `X L^T = B` for `X`.
    pub fn trsm_right_lower_transpose(&self, l: &Tile, b: &Tile) -> Result<Tile> {
        check_triangular(l, "trsm")?;
        if b.cols() != l.rows() {
            return Err(shape_err("trsm", format!("rhs has {} cols, factor is {}", b.cols(), l.rows())));
        }
        let mut out = b.clone();
        self.kernels.trsm_right_lower_transpose(l, &mut out)?;
        Ok(out)
    }

    /// `c - a a^T`; only the lower triangle of the result is meaningful.
    pub fn syrk_lower(&self, c: &Tile, a: &Tile) -> Result<Tile> {
        if !c.is_square() || a.rows() != c.rows() {
            return Err(shape_err(
                "syrk",
                format!("c {}x{}, a {}x{}", c.rows(), c.cols(), a.rows(), a.cols()),
            ));
        }
        let mut out = c.clone();
        self.kernels.syrk_lower(&mut out, a)?;
        Ok(out)
    }

    /// `c - a b^T`.
    pub fn gemm_update(&self, c: &Tile, a: &Tile, b: &Tile) -> Result<Tile> {
        if a.rows() != c.rows() || b.rows() != c.cols() || a.cols() != b.cols() {
            return Err(shape_err(
                "gemm_update",
                format!(
                    "c {}x{}, a {}x{}, b {}x{}",
                    c.rows(), c.cols(), a.rows(), a.cols(), b.rows(), b.cols()
                ),
            ));
        }
        let mut out = c.clone();
        self.kernels.gemm_update(&mut out, a, b)?;
        Ok(out)
    }

    /// `c + alpha op(a) op(b)`.
    pub fn gemm_full(&self, c: &Tile, a: &Tile, ta: Transpose, b: &Tile, tb: Transpose, alpha: f64) -> Result<Tile> {
        let (ar, ac) = if ta.is_trans() { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
        let (br, bc) = if tb.is_trans() { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
        if ar != c.rows() || bc != c.cols() || ac != br {
            return Err(shape_err(
                "gemm_full",
                format!("op(a) {ar}x{ac}, op(b) {br}x{bc}, c {}x{}", c.rows(), c.cols()),
            ));
        }
        let mut out = c.clone();
        self.kernels.gemm(&mut out, a, ta, b, tb, alpha)?;
        Ok(out)
    }

    /// Solves `L z = x`.
    pub fn trsv_forward(&self, l: &Tile, x: &[f64]) -> Result<Vec<f64>> {
        self.trsv(l, x, Transpose::No)
    }

    /// Solves `L^T z = x`.
    pub fn trsv_backward(&self, l: &Tile, x: &[f64]) -> Result<Vec<f64>> {
        self.trsv(l, x, Transpose::Yes)
    }

    fn trsv(&self, l: &Tile, x: &[f64], trans: Transpose) -> Result<Vec<f64>> {
        check_triangular(l, "trsv")?;
        if x.len() != l.rows() {
            return Err(Error::DimensionMismatch { expected: l.rows(), found: x.len() });
        }
        let mut out = x.to_vec();
        self.kernels.trsv(l, &mut out, trans)?;
        Ok(out)
    }

    /// `y + sign op(a) x`.
    pub fn gemv_update(&self, y: &[f64], a: &Tile, x: &[f64], trans: Transpose, sign: f64) -> Result<Vec<f64>> {
        let (rows, cols) = if trans.is_trans() { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
        if y.len() != rows || x.len() != cols {
            return Err(shape_err(
                "gemv",
                format!("op(a) {rows}x{cols}, x {}, y {}", x.len(), y.len()),
            ));
        }
        let mut out = y.to_vec();
        self.kernels.gemv(&mut out, a, x, trans, sign)?;
        Ok(out)
    }

    pub fn dot(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != v.len() {
            return Err(Error::DimensionMismatch { expected: u.len(), found: v.len() });
        }
        Ok(self.kernels.dot(u, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    fn backends() -> Vec<Blas> {
        let mut v = vec![Blas::reference()];
        if BackendId::System.is_available() {
            v.push(Blas::new(BackendId::System).unwrap());
        }
        v
    }

    #[test]
    fn potrf_two_by_two() {
        for blas in backends() {
            let l = blas.potrf(&Tile::from_rows(&[&[4.0, 2.0], &[2.0, 3.0]])).unwrap();
            assert_eq!(l.get(0, 0), 2.0);
            assert_eq!(l.get(0, 1), 0.0);
            assert_eq!(l.get(1, 0), 1.0);
            assert!(close(l.get(1, 1), 2f64.sqrt(), 1e-15));
            assert_eq!(blas.potrf(&Tile::identity(5)).unwrap(), Tile::identity(5));
        }
    }

    #[test]
    fn self_check_accepts_reference_and_loaded_system() {
        assert_eq!(self_check(&REFERENCE), Ok(()));
        if BackendId::System.is_available() {
            assert_eq!(self_check(Blas::new(BackendId::System).unwrap().kernels), Ok(()));
        }
    }

    #[test]
    fn potrf_matches_across_block_sizes() {
        for n in [1, 31, 33, 64, 100, 257] {
            let a = Tile::from_fn(n, n, |r, c| {
                let d = r as f64 - c as f64;
                (-d * d / 50.0).exp() + if r == c { 0.1 } else { 0.0 }
            });
            let reference = Blas::reference().potrf(&a).unwrap();
            for blas in backends() {
                let l = blas.potrf(&a).unwrap();
                for (x, y) in l.as_slice().iter().zip(reference.as_slice()) {
                    assert!(close(*x, *y, 1e-12), "n={n} {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn potrf_reports_pivot() {
        for blas in backends() {
            let a = Tile::from_rows(&[&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
            match blas.potrf(&a) {
                Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1, "{blas:?}"),
                other => panic!("expected factorization failure, got {other:?}"),
            }
        }
    }

    #[test]
    fn trsv_hand_solve() {
        for blas in backends() {
            let l = Tile::from_rows(&[&[2.0, 0.0], &[1.0, 1.0]]);
            assert_eq!(blas.trsv_forward(&l, &[2.0, 3.0]).unwrap(), vec![1.0, 2.0]);
            // L^T = [[2,1],[0,1]]: z1 = 2, z0 = (4 - 2) / 2
            assert_eq!(blas.trsv_backward(&l, &[4.0, 2.0]).unwrap(), vec![1.0, 2.0]);
            assert_eq!(blas.trsv_forward(&Tile::identity(2), &[5.0, 6.0]).unwrap(), vec![5.0, 6.0]);
        }
    }

    #[test]
    fn zero_diagonal_rejected() {
        let blas = Blas::reference();
        let l = Tile::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(blas.trsv_forward(&l, &[1.0, 1.0]), Err(Error::SingularTriangular { index: 1 }));
        assert!(matches!(
            blas.trsm_right_lower_transpose(&l, &Tile::identity(2)),
            Err(Error::SingularTriangular { index: 1 })
        ));
    }

    #[test]
    fn small_identities() {
        for blas in backends() {
            let c = Tile::from_rows(&[&[5.0]]);
            let r = blas.gemm_update(&c, &Tile::from_rows(&[&[2.0]]), &Tile::from_rows(&[&[3.0]])).unwrap();
            assert_eq!(r.get(0, 0), -1.0);

            let i2 = Tile::identity(2);
            let z = blas.syrk_lower(&i2, &i2).unwrap();
            assert_eq!((z.get(0, 0), z.get(1, 0), z.get(1, 1)), (0.0, 0.0, 0.0));

            let y = blas.gemv_update(&[1.0, 1.0], &i2, &[1.0, 1.0], Transpose::No, -1.0).unwrap();
            assert_eq!(y, vec![0.0, 0.0]);

            assert_eq!(blas.dot(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);

            let b = Tile::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
            let p = blas.gemm_full(&Tile::zeros(2, 2), &i2, Transpose::No, &b, Transpose::No, 1.0).unwrap();
            assert_eq!(p, b);
            assert_eq!(blas.trsm_right_lower_transpose(&i2, &b).unwrap(), b);
        }
    }

    #[test]
    fn shape_mismatches() {
        let blas = Blas::reference();
        let a = Tile::zeros(2, 3);
        assert!(blas.potrf(&a).is_err());
        assert!(blas.gemm_update(&Tile::zeros(2, 2), &a, &Tile::zeros(2, 2)).is_err());
        assert!(blas.syrk_lower(&a, &a).is_err());
        assert!(blas.dot(&[1.0], &[1.0, 2.0]).is_err());
        assert!(blas.gemv_update(&[0.0; 2], &a, &[0.0; 2], Transpose::No, 1.0).is_err());
    }

    #[test]
    fn backend_names_parse() {
        assert_eq!("reference".parse::<BackendId>().unwrap(), BackendId::Reference);
        assert_eq!("system".parse::<BackendId>().unwrap(), BackendId::System);
        assert!("mkl".parse::<BackendId>().is_err());
    }
}
