//! Uniform geographic gridding and the spatial weight matrix.
//!
//! Geography is discretized into `n_rows x n_cols` square cells of
//! `cell_size_m` meters; every cell is one location id. Adjacency between
//! locations is captured by a sparse spatial weight matrix: off-diagonal
//! entries are 1 for pairs of cells whose center distance is strictly below
//! a threshold `d`, the diagonal carries a self weight `q`, and row
//! normalization turns the matrix row-stochastic. Multiplying the normalized
//! matrix into an embedding table blends every location's row with its
//! geographic neighbors.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Mean-earth-radius equirectangular scale, meters per degree of latitude.
const METERS_PER_DEGREE: f64 = 6_371_000.0 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("point ({lat}, {lon}) falls outside the grid")]
    OutOfBounds { lat: f64, lon: f64 },
    #[error("row {row} has zero weight sum and cannot be normalized")]
    DegenerateRow { row: usize },
    #[error("dimension mismatch: matrix is {matrix} x {matrix}, operand has {rows} rows")]
    DimensionMismatch { matrix: usize, rows: usize },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
}

/// One cell of the grid, indexed as `row * n_cols + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LocationId(pub u32);

impl LocationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Uniform grid anchored at a geographic origin.
///
/// Coordinates are projected onto a local plane (equirectangular about the
/// origin latitude) and assigned to cells by floor division; the grid spans
/// `[origin, origin + extent)` in both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub cell_size_m: f64,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl GridSpec {
    pub fn new(
        origin_lat: f64,
        origin_lon: f64,
        cell_size_m: f64,
        n_rows: usize,
        n_cols: usize,
    ) -> Result<Self, GridError> {
        let spec = Self {
            origin_lat,
            origin_lon,
            cell_size_m,
            n_rows,
            n_cols,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.n_rows < 1 || self.n_cols < 1 {
            return Err(GridError::InvalidSpec(
                "n_rows and n_cols must be at least 1".into(),
            ));
        }
        if !(self.cell_size_m > 0.0) {
            return Err(GridError::InvalidSpec("cell_size_m must be positive".into()));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(GridError::InvalidSpec("origin must be finite".into()));
        }
        Ok(())
    }

    /// Total number of distinct locations.
    pub fn n_locations(&self) -> usize {
        self.n_rows * self.n_cols
    }

    /// Meters east/north of the origin for a geographic point.
    pub fn project(&self, lat: f64, lon: f64) -> (f64, f64) {
        let east = (lon - self.origin_lon) * METERS_PER_DEGREE * self.origin_lat.to_radians().cos();
        let north = (lat - self.origin_lat) * METERS_PER_DEGREE;
        (east, north)
    }

    /// Inverse of [`project`](Self::project); handy for building fixtures.
    pub fn unproject(&self, east_m: f64, north_m: f64) -> (f64, f64) {
        let lat = self.origin_lat + north_m / METERS_PER_DEGREE;
        let lon = self.origin_lon
            + east_m / (METERS_PER_DEGREE * self.origin_lat.to_radians().cos());
        (lat, lon)
    }

    /// Maps a point to the cell containing it.
    pub fn locate(&self, lat: f64, lon: f64) -> Result<LocationId, GridError> {
        let (east, north) = self.project(lat, lon);
        let col = (east / self.cell_size_m).floor();
        let row = (north / self.cell_size_m).floor();
        if col < 0.0 || row < 0.0 || col >= self.n_cols as f64 || row >= self.n_rows as f64 {
            return Err(GridError::OutOfBounds { lat, lon });
        }
        Ok(self.cell_id(row as usize, col as usize))
    }

    pub fn cell_id(&self, row: usize, col: usize) -> LocationId {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        LocationId((row * self.n_cols + col) as u32)
    }

    pub fn row_col(&self, id: LocationId) -> (usize, usize) {
        (id.index() / self.n_cols, id.index() % self.n_cols)
    }

    /// Center of a cell, meters east/north of the origin.
    pub fn cell_center(&self, id: LocationId) -> (f64, f64) {
        let (row, col) = self.row_col(id);
        (
            (col as f64 + 0.5) * self.cell_size_m,
            (row as f64 + 0.5) * self.cell_size_m,
        )
    }

    /// Euclidean distance between cell centers in the projected plane.
    pub fn cell_center_distance(&self, i: LocationId, j: LocationId) -> f64 {
        let (xi, yi) = self.cell_center(i);
        let (xj, yj) = self.cell_center(j);
        let dx = xj - xi;
        let dy = yj - yi;
        (dx * dx + dy * dy).sqrt()
    }
}

/// Sparse row-compressed `|L| x |L|` spatial weight matrix.
///
/// Column indices within each row are sorted ascending. Rows never exceed a
/// small neighbor ring, so storage stays linear in `|L|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeightMatrix {
    size: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
    normalized: bool,
}

impl SpatialWeightMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Entries `(column, weight)` of one row, columns ascending.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[span.clone()].binary_search(&(j as u32)) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.values[self.row_ptr[i]..self.row_ptr[i + 1]].iter().sum()
    }

    /// Text export: header `|L| nnz`, then one `i j weight` line per entry.
    pub fn write_text<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{} {}", self.size, self.nnz())?;
        for i in 0..self.size {
            for (j, v) in self.row(i) {
                writeln!(out, "{} {} {:.8e}", i, j, v)?;
            }
        }
        Ok(())
    }
}

/// Unnormalized spatial weights: diagonal `q`, off-diagonal 1 for every pair
/// of cells strictly closer than `d` meters, 0 elsewhere.
pub fn build_spatial_weights(spec: &GridSpec, d: f64, q: f64) -> SpatialWeightMatrix {
    assert!(d >= 0.0, "neighbor threshold d must be nonnegative");
    assert!(q > 0.0, "self weight q must be positive");
    let n = spec.n_locations();
    let reach = (d / spec.cell_size_m).ceil() as i64;

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::new();
    let mut values = Vec::new();
    row_ptr.push(0);

    for row in 0..spec.n_rows as i64 {
        for col in 0..spec.n_cols as i64 {
            let i = spec.cell_id(row as usize, col as usize);
            for dr in -reach..=reach {
                let r = row + dr;
                if r < 0 || r >= spec.n_rows as i64 {
                    continue;
                }
                for dc in -reach..=reach {
                    let c = col + dc;
                    if c < 0 || c >= spec.n_cols as i64 {
                        continue;
                    }
                    let j = spec.cell_id(r as usize, c as usize);
                    if j == i {
                        col_idx.push(j.0);
                        values.push(q);
                    } else if spec.cell_center_distance(i, j) < d {
                        col_idx.push(j.0);
                        values.push(1.0);
                    }
                }
            }
            row_ptr.push(col_idx.len());
        }
    }

    SpatialWeightMatrix {
        size: n,
        row_ptr,
        col_idx,
        values,
        normalized: false,
    }
}

/// Divides every entry by its row sum so each row sums to one.
pub fn row_normalize(m: &SpatialWeightMatrix) -> Result<SpatialWeightMatrix, GridError> {
    let mut out = m.clone();
    for i in 0..m.size {
        let span = m.row_ptr[i]..m.row_ptr[i + 1];
        let sum: f64 = m.values[span.clone()].iter().sum();
        if sum <= 0.0 {
            return Err(GridError::DegenerateRow { row: i });
        }
        for v in &mut out.values[span] {
            *v /= sum;
        }
    }
    out.normalized = true;
    Ok(out)
}

/// Left-multiplies a normalized weight matrix into an `|L| x E` embedding.
///
/// Each output row is the convex combination of its neighbor rows. The first
/// product seeds the accumulator, so an exact identity matrix reproduces the
/// input bitwise.
pub fn apply_to_embedding(
    m: &SpatialWeightMatrix,
    emb: &Array2<f64>,
) -> Result<Array2<f64>, GridError> {
    assert!(m.normalized, "spatial weight matrix must be row-normalized");
    if emb.nrows() != m.size {
        return Err(GridError::DimensionMismatch {
            matrix: m.size,
            rows: emb.nrows(),
        });
    }
    let dim = emb.ncols();
    let mut out = Array2::zeros((m.size, dim));
    for i in 0..m.size {
        let mut dst = out.row_mut(i);
        let mut first = true;
        for (j, w) in m.row(i) {
            let src = emb.row(j);
            if first {
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d = w * s;
                }
                first = false;
            } else {
                dst.scaled_add(w, &src);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid(cell: f64, rows: usize, cols: usize) -> GridSpec {
        GridSpec::new(37.5, 127.0, cell, rows, cols).unwrap()
    }

    #[test]
    fn locate_origin_cell() {
        let g = grid(100.0, 4, 4);
        let id = g.locate(g.origin_lat, g.origin_lon).unwrap();
        assert_eq!(id, LocationId(0));
    }

    #[test]
    fn locate_150m_east() {
        let g = grid(100.0, 4, 4);
        let (lat, lon) = g.unproject(150.0, 0.0);
        assert_eq!(g.locate(lat, lon).unwrap(), LocationId(1));
    }

    #[test]
    fn locate_rejects_out_of_bounds() {
        let g = grid(100.0, 4, 4);
        let (lat, lon) = g.unproject(-1.0, 50.0);
        assert!(matches!(g.locate(lat, lon), Err(GridError::OutOfBounds { .. })));
        let (lat, lon) = g.unproject(50.0, 400.0);
        assert!(g.locate(lat, lon).is_err());
    }

    #[test]
    fn locate_round_trips_within_half_diagonal() {
        let g = grid(100.0, 8, 6);
        let mut rng = crate::seed::stream(&[42]);
        let bound = g.cell_size_m * 2f64.sqrt() / 2.0 + 1e-6;
        for _ in 0..20 {
            let east = rng.gen::<f64>() * g.n_cols as f64 * g.cell_size_m;
            let north = rng.gen::<f64>() * g.n_rows as f64 * g.cell_size_m;
            let (lat, lon) = g.unproject(east, north);
            let id = g.locate(lat, lon).unwrap();
            let (cx, cy) = g.cell_center(id);
            let dist = ((cx - east).powi(2) + (cy - north).powi(2)).sqrt();
            assert!(dist <= bound, "point {dist} m from its cell center");
        }
    }

    #[test]
    fn center_distance_identity_and_neighbors() {
        let g = grid(100.0, 3, 3);
        let a = g.cell_id(1, 1);
        assert_eq!(g.cell_center_distance(a, a), 0.0);
        let right = g.cell_id(1, 2);
        assert!((g.cell_center_distance(a, right) - 100.0).abs() < 1e-9);
        let diag = g.cell_id(2, 2);
        assert!((g.cell_center_distance(a, diag) - 141.42).abs() < 0.01);
        assert_eq!(
            g.cell_center_distance(a, diag),
            g.cell_center_distance(diag, a)
        );
    }

    #[test]
    fn build_single_cell() {
        let g = grid(100.0, 1, 1);
        let m = build_spatial_weights(&g, 150.0, 3.0);
        assert_eq!(m.size(), 1);
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 0), 3.0);
    }

    #[test]
    fn build_two_by_two_all_neighbors() {
        let g = grid(100.0, 2, 2);
        // brute-force pairwise distances: 100, 100, 141.42.., all below 150
        for i in 0..4u32 {
            for j in 0..4u32 {
                if i != j {
                    assert!(g.cell_center_distance(LocationId(i), LocationId(j)) < 150.0);
                }
            }
        }
        let m = build_spatial_weights(&g, 150.0, 2.0);
        for i in 0..4 {
            assert_eq!(m.get(i, i), 2.0);
            for j in 0..4 {
                if i != j {
                    assert_eq!(m.get(i, j), 1.0);
                }
            }
        }
    }

    #[test]
    fn build_threshold_below_spacing_isolates() {
        let g = grid(100.0, 2, 2);
        let m = build_spatial_weights(&g, 50.0, 5.0);
        assert_eq!(m.nnz(), 4); // diagonal only
        for i in 0..4 {
            assert_eq!(m.row_sum(i), 5.0);
        }
    }

    #[test]
    fn normalize_single_row() {
        let g = grid(100.0, 1, 1);
        let m = row_normalize(&build_spatial_weights(&g, 150.0, 7.0)).unwrap();
        assert_eq!(m.get(0, 0), 1.0);
    }

    #[test]
    fn normalize_direct_arithmetic() {
        // row with q = 2 and three unit neighbors -> (0.4, 0.2, 0.2, 0.2)
        let g = grid(100.0, 2, 2);
        let m = row_normalize(&build_spatial_weights(&g, 150.0, 2.0)).unwrap();
        for i in 0..4 {
            assert!((m.get(i, i) - 0.4).abs() < 1e-12);
            for j in 0..4 {
                if i != j {
                    assert!((m.get(i, j) - 0.2).abs() < 1e-12);
                }
            }
            assert!((m.row_sum(i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_isolated_cells_gives_identity() {
        let g = grid(100.0, 2, 3);
        let m = row_normalize(&build_spatial_weights(&g, 50.0, 1e4)).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn apply_identity_is_bitwise_noop() {
        let g = grid(100.0, 2, 3);
        let m = row_normalize(&build_spatial_weights(&g, 50.0, 3.0)).unwrap();
        let mut rng = crate::seed::stream(&[7]);
        let emb = Array2::from_shape_simple_fn((6, 4), || rng.gen::<f64>() - 0.5);
        let out = apply_to_embedding(&m, &emb).unwrap();
        assert_eq!(out, emb);
    }

    #[test]
    fn apply_mutual_pair_averages_rows() {
        // 1x2 grid, q = 1: each output row is the mean of the two input rows
        let g = grid(100.0, 1, 2);
        let m = row_normalize(&build_spatial_weights(&g, 150.0, 1.0)).unwrap();
        let emb = array![[2.0, 4.0], [6.0, -2.0]];
        let out = apply_to_embedding(&m, &emb).unwrap();
        let expect = array![[4.0, 1.0], [4.0, 1.0]];
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_rejects_dimension_mismatch() {
        let g = grid(100.0, 2, 2);
        let m = row_normalize(&build_spatial_weights(&g, 150.0, 1.0)).unwrap();
        let emb = Array2::<f64>::zeros((3, 4));
        assert!(matches!(
            apply_to_embedding(&m, &emb),
            Err(GridError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn large_self_weight_approaches_identity() {
        let g = grid(100.0, 3, 3);
        let m = row_normalize(&build_spatial_weights(&g, 150.0, 1e9)).unwrap();
        let mut rng = crate::seed::stream(&[11]);
        let emb = Array2::from_shape_simple_fn((9, 5), || rng.gen::<f64>() * 2.0 - 1.0);
        let out = apply_to_embedding(&m, &emb).unwrap();
        for (a, b) in out.iter().zip(emb.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn text_export_layout() {
        let g = grid(100.0, 1, 2);
        let m = row_normalize(&build_spatial_weights(&g, 150.0, 1.0)).unwrap();
        let mut buf = Vec::new();
        m.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("2 4"));
        assert_eq!(lines.next(), Some("0 0 5.00000000e-1"));
        assert_eq!(lines.next(), Some("0 1 5.00000000e-1"));
    }

    proptest! {
        #[test]
        fn rows_are_stochastic_and_support_symmetric(
            rows in 1usize..7,
            cols in 1usize..7,
            d in 0.0f64..400.0,
            q in 0.01f64..1e5,
        ) {
            let g = grid(100.0, rows, cols);
            let m = build_spatial_weights(&g, d, q);
            let n = row_normalize(&m).unwrap();
            let sz = g.n_locations();
            for i in 0..sz {
                prop_assert!((n.row_sum(i) - 1.0).abs() < 1e-9);
                for (j, v) in n.row(i) {
                    prop_assert!(v >= 0.0);
                    if j != i {
                        prop_assert!(m.get(j, i) == 1.0); // support symmetry
                    }
                }
            }
        }

        #[test]
        fn neighbor_set_monotone_in_threshold(
            rows in 1usize..6,
            cols in 1usize..6,
            d1 in 0.0f64..300.0,
            extra in 0.0f64..200.0,
        ) {
            let g = grid(100.0, rows, cols);
            let m1 = build_spatial_weights(&g, d1, 1.0);
            let m2 = build_spatial_weights(&g, d1 + extra, 1.0);
            for i in 0..g.n_locations() {
                for (j, _) in m1.row(i) {
                    prop_assert!(m2.get(i, j) > 0.0);
                }
            }
        }
    }
}
