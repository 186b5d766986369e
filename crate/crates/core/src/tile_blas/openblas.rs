//! Host OpenBLAS through its CBLAS and Fortran LAPACK entry points.
//!
//! Tiles are row-major. BLAS calls use the CBLAS row-major layout directly;
//! `dpotrf_` is column-major only, so a row-major lower factor is obtained by
//! factorizing the upper triangle of the column-major view.

use std::os::raw::{c_char, c_int};
use std::sync::Once;

use super::{TileKernels, Transpose};
use crate::error::{Error, Result};
use crate::tiled_matrix::Tile;

const ROW_MAJOR: c_int = 101;
const NO_TRANS: c_int = 111;
const TRANS: c_int = 112;
const LOWER: c_int = 122;
const NON_UNIT: c_int = 131;
const RIGHT: c_int = 142;

#[link(name = "openblas")]
extern "C" {
    fn openblas_set_num_threads(n: c_int);
    fn openblas_get_corename() -> *const c_char;

    fn dpotrf_(uplo: *const c_char, n: *const c_int, a: *mut f64, lda: *const c_int, info: *mut c_int);

    fn cblas_dtrsm(
        layout: c_int, side: c_int, uplo: c_int, trans: c_int, diag: c_int,
        m: c_int, n: c_int, alpha: f64, a: *const f64, lda: c_int, b: *mut f64, ldb: c_int,
    );
    fn cblas_dsyrk(
        layout: c_int, uplo: c_int, trans: c_int, n: c_int, k: c_int,
        alpha: f64, a: *const f64, lda: c_int, beta: f64, c: *mut f64, ldc: c_int,
    );
    fn cblas_dgemm(
        layout: c_int, ta: c_int, tb: c_int, m: c_int, n: c_int, k: c_int,
        alpha: f64, a: *const f64, lda: c_int, b: *const f64, ldb: c_int,
        beta: f64, c: *mut f64, ldc: c_int,
    );
    fn cblas_dtrsv(
        layout: c_int, uplo: c_int, trans: c_int, diag: c_int,
        n: c_int, a: *const f64, lda: c_int, x: *mut f64, incx: c_int,
    );
    fn cblas_dgemv(
        layout: c_int, trans: c_int, m: c_int, n: c_int, alpha: f64,
        a: *const f64, lda: c_int, x: *const f64, incx: c_int, beta: f64, y: *mut f64, incy: c_int,
    );
    fn cblas_ddot(n: c_int, x: *const f64, incx: c_int, y: *const f64, incy: c_int) -> f64;
}

static SINGLE_THREADED: Once = Once::new();

fn dim(n: usize) -> c_int {
    c_int::try_from(n).expect("tile dimension exceeds BLAS integer range")
}

fn flag(t: Transpose) -> c_int {
    if t.is_trans() {
        TRANS
    } else {
        NO_TRANS
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OpenBlas;

impl OpenBlas {
    pub fn new() -> Self {
        // Parallelism comes from the task runtime; kernels stay sequential.
        SINGLE_THREADED.call_once(|| unsafe { openblas_set_num_threads(1) });
        OpenBlas
    }

    /// Kernel set OpenBLAS selected for this CPU.
    pub fn core_name(&self) -> String {
        let name = unsafe { openblas_get_corename() };
        if name.is_null() {
            return "unknown".into();
        }
        unsafe { std::ffi::CStr::from_ptr(name) }.to_string_lossy().into_owned()
    }
}

impl TileKernels for OpenBlas {
    fn potrf(&self, a: &mut Tile) -> Result<()> {
        let n = dim(a.rows());
        let mut info: c_int = 0;
        let uplo = b'U' as c_char;
        unsafe { dpotrf_(&uplo, &n, a.as_mut_slice().as_mut_ptr(), &n, &mut info) };
        if info > 0 {
            return Err(Error::NotPositiveDefinite { tile: None, pivot: info as usize - 1 });
        }
        assert_eq!(info, 0, "dpotrf_ rejected its arguments");
        let n = a.rows();
        for r in 0..n {
            for c in r + 1..n {
                a.set(r, c, 0.0);
            }
        }
        Ok(())
    }

    fn trsm_right_lower_transpose(&self, l: &Tile, b: &mut Tile) -> Result<()> {
        let (m, n) = (dim(b.rows()), dim(b.cols()));
        unsafe {
            cblas_dtrsm(
                ROW_MAJOR, RIGHT, LOWER, TRANS, NON_UNIT, m, n, 1.0,
                l.as_slice().as_ptr(), dim(l.cols()), b.as_mut_slice().as_mut_ptr(), n,
            )
        };
        Ok(())
    }

    fn syrk_lower(&self, c: &mut Tile, a: &Tile) -> Result<()> {
        let (n, k) = (dim(c.rows()), dim(a.cols()));
        unsafe {
            cblas_dsyrk(
                ROW_MAJOR, LOWER, NO_TRANS, n, k, -1.0,
                a.as_slice().as_ptr(), k, 1.0, c.as_mut_slice().as_mut_ptr(), n,
            )
        };
        Ok(())
    }

    fn gemm(&self, c: &mut Tile, a: &Tile, ta: Transpose, b: &Tile, tb: Transpose, alpha: f64) -> Result<()> {
        let k = if ta.is_trans() { a.rows() } else { a.cols() };
        unsafe {
            cblas_dgemm(
                ROW_MAJOR, flag(ta), flag(tb), dim(c.rows()), dim(c.cols()), dim(k), alpha,
                a.as_slice().as_ptr(), dim(a.cols()), b.as_slice().as_ptr(), dim(b.cols()),
                1.0, c.as_mut_slice().as_mut_ptr(), dim(c.cols()),
            )
        };
        Ok(())
    }

    fn gemm_update(&self, c: &mut Tile, a: &Tile, b: &Tile) -> Result<()> {
        self.gemm(c, a, Transpose::No, b, Transpose::Yes, -1.0)
    }

    fn trsv(&self, l: &Tile, x: &mut [f64], trans: Transpose) -> Result<()> {
        let n = dim(l.rows());
        unsafe {
            cblas_dtrsv(ROW_MAJOR, LOWER, flag(trans), NON_UNIT, n, l.as_slice().as_ptr(), n, x.as_mut_ptr(), 1)
        };
        Ok(())
    }

    fn gemv(&self, y: &mut [f64], a: &Tile, x: &[f64], trans: Transpose, alpha: f64) -> Result<()> {
        unsafe {
            cblas_dgemv(
                ROW_MAJOR, flag(trans), dim(a.rows()), dim(a.cols()), alpha,
                a.as_slice().as_ptr(), dim(a.cols()), x.as_ptr(), 1, 1.0, y.as_mut_ptr(), 1,
            )
        };
        Ok(())
    }

    fn dot(&self, u: &[f64], v: &[f64]) -> f64 {
        unsafe { cblas_ddot(dim(u.len()), u.as_ptr(), 1, v.as_ptr(), 1) }
    }
}
