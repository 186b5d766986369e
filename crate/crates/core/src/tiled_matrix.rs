//! Tile storage and index arithmetic.
//!
//! All tiles of one matrix share a uniform `tile_size`; when `n_total` is not
//! a multiple of the tile count the last tile row/column is padded. Elements
//! are stored row-major everywhere in the crate.
//!
//! Padding conventions:
//! * vectors and rectangular panels carry zeros in their padding,
//! * diagonal tiles of a symmetric matrix carry an identity block in their
//!   padding so a Cholesky factorization of the padded matrix stays defined.

use crate::error::{Error, Result};

/// Partition of one matrix dimension into `tiles_per_dim` tiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileSpec {
    n_total: usize,
    tiles_per_dim: usize,
    tile_size: usize,
}

impl TileSpec {
    pub fn new(n_total: usize, tiles_per_dim: usize) -> Result<Self> {
        if n_total == 0 || tiles_per_dim == 0 || tiles_per_dim > n_total {
            return Err(Error::InvalidTiling { n_total, tiles_per_dim });
        }
        let tile_size = n_total.div_ceil(tiles_per_dim);
        Ok(Self { n_total, tiles_per_dim, tile_size })
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn tiles_per_dim(&self) -> usize {
        self.tiles_per_dim
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    /// Logical size including padding.
    pub fn padded_len(&self) -> usize {
        self.tile_size * self.tiles_per_dim
    }

    /// Number of non-padding rows in tile `t`.
    pub fn valid_len(&self, t: usize) -> usize {
        let start = t * self.tile_size;
        self.tile_size.min(self.n_total.saturating_sub(start))
    }

    /// Global index of local row `r` inside tile `t`.
    #[inline]
    pub fn global(&self, t: usize, r: usize) -> usize {
        t * self.tile_size + r
    }
}

/// Convenience wrapper matching the free-function form of the operation.
pub fn make_spec(n_total: usize, tiles_per_dim: usize) -> Result<TileSpec> {
    TileSpec::new(n_total, tiles_per_dim)
}

/// Dense row-major matrix. Used for single tiles and for untiled oracle data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tile {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Tile::from_vec",
                detail: format!("{} elements for a {rows}x{cols} tile", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tile from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Tile {
        Tile::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Frobenius norm, summed in storage order.
    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn packed_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Symmetric matrix holding only its lower tile triangle (`i >= j`).
#[derive(Debug, Clone, PartialEq)]
pub struct TiledSymmetricMatrix {
    spec: TileSpec,
    tiles: Vec<Tile>,
}

impl TiledSymmetricMatrix {
    /// `tiles` is the packed lower triangle in row order:
    /// (0,0), (1,0), (1,1), (2,0), ...
    pub fn from_tiles(spec: TileSpec, tiles: Vec<Tile>) -> Result<Self> {
        let t = spec.tiles_per_dim();
        if tiles.len() != t * (t + 1) / 2 {
            return Err(Error::ShapeMismatch {
                op: "TiledSymmetricMatrix::from_tiles",
                detail: format!("{} tiles for {t} tiles per dimension", tiles.len()),
            });
        }
        let b = spec.tile_size();
        if let Some(bad) = tiles.iter().find(|tile| tile.rows() != b || tile.cols() != b) {
            return Err(Error::ShapeMismatch {
                op: "TiledSymmetricMatrix::from_tiles",
                detail: format!("{}x{} tile, expected {b}x{b}", bad.rows(), bad.cols()),
            });
        }
        Ok(Self { spec, tiles })
    }

    /// Tiles a dense symmetric matrix, reading only its lower triangle.
    pub fn from_dense(spec: TileSpec, dense: &Tile) -> Result<Self> {
        let n = spec.n_total();
        if dense.rows() != n || dense.cols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: dense.rows() });
        }
        let b = spec.tile_size();
        let t = spec.tiles_per_dim();
        let mut tiles = Vec::with_capacity(t * (t + 1) / 2);
        for i in 0..t {
            for j in 0..=i {
                tiles.push(Tile::from_fn(b, b, |r, c| {
                    let (gr, gc) = (spec.global(i, r), spec.global(j, c));
                    if gr < n && gc < n {
                        if gr >= gc {
                            dense.get(gr, gc)
                        } else {
                            dense.get(gc, gr)
                        }
                    } else if gr == gc {
                        1.0
                    } else {
                        0.0
                    }
                }));
            }
        }
        Ok(Self { spec, tiles })
    }

    pub fn spec(&self) -> TileSpec {
        self.spec
    }

    pub fn tile(&self, i: usize, j: usize) -> Result<&Tile> {
        let t = self.spec.tiles_per_dim();
        if i >= t || j > i {
            return Err(Error::TileIndex { i, j, tiles: t });
        }
        Ok(&self.tiles[packed_index(i, j)])
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    /// Logical element; the upper triangle is read from its mirror.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        let b = self.spec.tile_size();
        self.tiles[packed_index(r / b, c / b)].get(r % b, c % b)
    }

    /// Dense `n_total x n_total` matrix, padding excluded.
    pub fn to_dense(&self) -> Tile {
        let n = self.spec.n_total();
        Tile::from_fn(n, n, |r, c| self.get(r, c))
    }

    /// Dense lower-triangular matrix (strict upper zero). Used to inspect a
    /// Cholesky factor stored in this container.
    pub fn to_dense_lower(&self) -> Tile {
        let n = self.spec.n_total();
        Tile::from_fn(n, n, |r, c| if r >= c { self.get(r, c) } else { 0.0 })
    }
}

/// Rectangular matrix split into a full grid of tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledPanel {
    row_spec: TileSpec,
    col_spec: TileSpec,
    tiles: Vec<Tile>,
}

impl TiledPanel {
    /// `tiles` in row-major grid order.
    pub fn from_tiles(row_spec: TileSpec, col_spec: TileSpec, tiles: Vec<Tile>) -> Result<Self> {
        let (tr, tc) = (row_spec.tiles_per_dim(), col_spec.tiles_per_dim());
        if tiles.len() != tr * tc {
            return Err(Error::ShapeMismatch {
                op: "TiledPanel::from_tiles",
                detail: format!("{} tiles for a {tr}x{tc} grid", tiles.len()),
            });
        }
        let (br, bc) = (row_spec.tile_size(), col_spec.tile_size());
        if let Some(bad) = tiles.iter().find(|tile| tile.rows() != br || tile.cols() != bc) {
            return Err(Error::ShapeMismatch {
                op: "TiledPanel::from_tiles",
                detail: format!("{}x{} tile, expected {br}x{bc}", bad.rows(), bad.cols()),
            });
        }
        Ok(Self { row_spec, col_spec, tiles })
    }

    pub fn from_dense(row_spec: TileSpec, col_spec: TileSpec, dense: &Tile) -> Result<Self> {
        let (m, n) = (row_spec.n_total(), col_spec.n_total());
        if dense.rows() != m {
            return Err(Error::DimensionMismatch { expected: m, found: dense.rows() });
        }
        if dense.cols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: dense.cols() });
        }
        let (br, bc) = (row_spec.tile_size(), col_spec.tile_size());
        let mut tiles = Vec::new();
        for i in 0..row_spec.tiles_per_dim() {
            for j in 0..col_spec.tiles_per_dim() {
                tiles.push(Tile::from_fn(br, bc, |r, c| {
                    let (gr, gc) = (row_spec.global(i, r), col_spec.global(j, c));
                    if gr < m && gc < n {
                        dense.get(gr, gc)
                    } else {
                        0.0
                    }
                }));
            }
        }
        Ok(Self { row_spec, col_spec, tiles })
    }

    pub fn row_spec(&self) -> TileSpec {
        self.row_spec
    }

    pub fn col_spec(&self) -> TileSpec {
        self.col_spec
    }

    pub fn tile(&self, i: usize, j: usize) -> Result<&Tile> {
        let (tr, tc) = (self.row_spec.tiles_per_dim(), self.col_spec.tiles_per_dim());
        if i >= tr || j >= tc {
            return Err(Error::TileIndex { i, j, tiles: tr.max(tc) });
        }
        Ok(&self.tiles[i * tc + j])
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn to_dense(&self) -> Tile {
        let (m, n) = (self.row_spec.n_total(), self.col_spec.n_total());
        let (br, bc) = (self.row_spec.tile_size(), self.col_spec.tile_size());
        let tc = self.col_spec.tiles_per_dim();
        Tile::from_fn(m, n, |r, c| self.tiles[(r / br) * tc + c / bc].get(r % br, c % bc))
    }
}

/// Vector split into `tile_size`-length segments.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledVector {
    spec: TileSpec,
    segments: Vec<Vec<f64>>,
}

impl TiledVector {
    /// Splits a dense vector; padding is zero.
    pub fn scatter(spec: TileSpec, values: &[f64]) -> Result<Self> {
        if values.len() != spec.n_total() {
            return Err(Error::DimensionMismatch { expected: spec.n_total(), found: values.len() });
        }
        let b = spec.tile_size();
        let segments = (0..spec.tiles_per_dim())
            .map(|t| {
                let mut seg = vec![0.0; b];
                let valid = spec.valid_len(t);
                if valid > 0 {
                    seg[..valid].copy_from_slice(&values[t * b..t * b + valid]);
                }
                seg
            })
            .collect();
        Ok(Self { spec, segments })
    }

    /// Takes ownership of raw segments and zeroes their padding.
    pub fn from_segments(spec: TileSpec, mut segments: Vec<Vec<f64>>) -> Result<Self> {
        if segments.len() != spec.tiles_per_dim()
            || segments.iter().any(|s| s.len() != spec.tile_size())
        {
            return Err(Error::ShapeMismatch {
                op: "TiledVector::from_segments",
                detail: format!(
                    "expected {} segments of length {}",
                    spec.tiles_per_dim(),
                    spec.tile_size()
                ),
            });
        }
        for (t, seg) in segments.iter_mut().enumerate() {
            let valid = spec.valid_len(t);
            seg[valid..].fill(0.0);
        }
        Ok(Self { spec, segments })
    }

    pub fn spec(&self) -> TileSpec {
        self.spec
    }

    pub fn segments(&self) -> &[Vec<f64>] {
        &self.segments
    }

    pub fn into_segments(self) -> Vec<Vec<f64>> {
        self.segments
    }

    /// Overwrites every padding slot with `value`. Testing aid for checking
    /// that no operation reads padding.
    pub fn fill_padding(&mut self, value: f64) {
        for (t, seg) in self.segments.iter_mut().enumerate() {
            let valid = self.spec.valid_len(t);
            seg[valid..].fill(value);
        }
    }

    pub fn gather(&self) -> Vec<f64> {
        gather_vector(self)
    }
}

/// Concatenates the segments of `v` and drops padding.
pub fn gather_vector(v: &TiledVector) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.spec.n_total());
    for (t, seg) in v.segments.iter().enumerate() {
        out.extend_from_slice(&seg[..v.spec.valid_len(t)]);
    }
    out
}

/// Dense form of a tiled symmetric matrix.
pub fn to_dense(m: &TiledSymmetricMatrix) -> Tile {
    m.to_dense()
}
