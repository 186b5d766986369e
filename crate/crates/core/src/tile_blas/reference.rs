//! Portable triple-loop kernels.
//!
//! Every reduction runs in ascending index order, so identical inputs give
//! bitwise-identical outputs on any host.

use super::{TileKernels, Transpose};
use crate::error::{Error, Result};
use crate::tiled_matrix::Tile;

#[derive(Debug, Default, Clone, Copy)]
pub struct Reference;

impl TileKernels for Reference {
    fn potrf(&self, a: &mut Tile) -> Result<()> {
        let n = a.rows();
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..j {
                let v = a.get(j, k);
                acc += v * v;
            }
            let pivot = a.get(j, j) - acc;
            if !(pivot > 0.0) {
                return Err(Error::NotPositiveDefinite { tile: None, pivot: j });
            }
            let d = pivot.sqrt();
            a.set(j, j, d);
            for i in j + 1..n {
                let mut acc = 0.0;
                for k in 0..j {
                    acc += a.get(i, k) * a.get(j, k);
                }
                let v = (a.get(i, j) - acc) / d;
                a.set(i, j, v);
            }
        }
        for r in 0..n {
            for c in r + 1..n {
                a.set(r, c, 0.0);
            }
        }
        Ok(())
    }

    fn trsm_right_lower_transpose(&self, l: &Tile, b: &mut Tile) -> Result<()> {
        // Row r of X solves L * x_r^T = b_r^T.
        let n = l.rows();
        for r in 0..b.rows() {
            let row = &mut b.as_mut_slice()[r * n..(r + 1) * n];
            for c in 0..n {
                let mut acc = 0.0;
                for k in 0..c {
                    acc += l.get(c, k) * row[k];
                }
                row[c] = (row[c] - acc) / l.get(c, c);
            }
        }
        Ok(())
    }

    fn syrk_lower(&self, c: &mut Tile, a: &Tile) -> Result<()> {
        let n = c.rows();
        for r in 0..n {
            let ar = a.row(r);
            for col in 0..=r {
                let ac = a.row(col);
                let mut acc = 0.0;
                for k in 0..ar.len() {
                    acc += ar[k] * ac[k];
                }
                c.set(r, col, c.get(r, col) - acc);
            }
        }
        Ok(())
    }

    fn gemm(&self, c: &mut Tile, a: &Tile, ta: Transpose, b: &Tile, tb: Transpose, alpha: f64) -> Result<()> {
        let inner = if ta.is_trans() { a.rows() } else { a.cols() };
        let op_a = |r: usize, k: usize| if ta.is_trans() { a.get(k, r) } else { a.get(r, k) };
        let op_b = |k: usize, col: usize| if tb.is_trans() { b.get(col, k) } else { b.get(k, col) };
        for r in 0..c.rows() {
            for col in 0..c.cols() {
                let mut acc = 0.0;
                for k in 0..inner {
                    acc += op_a(r, k) * op_b(k, col);
                }
                c.set(r, col, c.get(r, col) + alpha * acc);
            }
        }
        Ok(())
    }

    fn gemm_update(&self, c: &mut Tile, a: &Tile, b: &Tile) -> Result<()> {
        // Row-contiguous specialisation of c - a * b^T.
        for r in 0..c.rows() {
            let ar = a.row(r);
            for col in 0..c.cols() {
                let bc = b.row(col);
                let mut acc = 0.0;
                for k in 0..ar.len() {
                    acc += ar[k] * bc[k];
                }
                c.set(r, col, c.get(r, col) - acc);
            }
        }
        Ok(())
    }

    fn trsv(&self, l: &Tile, x: &mut [f64], trans: Transpose) -> Result<()> {
        let n = l.rows();
        match trans {
            Transpose::No => {
                for i in 0..n {
                    let mut acc = 0.0;
                    for k in 0..i {
                        acc += l.get(i, k) * x[k];
                    }
                    x[i] = (x[i] - acc) / l.get(i, i);
                }
            }
            Transpose::Yes => {
                for i in (0..n).rev() {
                    let mut acc = 0.0;
                    for k in i + 1..n {
                        acc += l.get(k, i) * x[k];
                    }
                    x[i] = (x[i] - acc) / l.get(i, i);
                }
            }
        }
        Ok(())
    }

    fn gemv(&self, y: &mut [f64], a: &Tile, x: &[f64], trans: Transpose, alpha: f64) -> Result<()> {
        match trans {
            Transpose::No => {
                for (r, yr) in y.iter_mut().enumerate() {
                    let row = a.row(r);
                    let mut acc = 0.0;
                    for k in 0..row.len() {
                        acc += row[k] * x[k];
                    }
                    *yr += alpha * acc;
                }
            }
            Transpose::Yes => {
                for (col, yc) in y.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..a.rows() {
                        acc += a.get(k, col) * x[k];
                    }
                    *yc += alpha * acc;
                }
            }
        }
        Ok(())
    }

    fn dot(&self, u: &[f64], v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for k in 0..u.len() {
            acc += u[k] * v[k];
        }
        acc
    }
}
