//! Equirectangular grid geometry, latitude weights, tiling and the spatial
//! kernels (Gaussian blur, box means) shared by the rest of the crate.
//!
//! Rasters are row-major with rows running north to south and columns running
//! east from `lon_start`. Longitude is treated as periodic by every kernel;
//! latitude edges are replicated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

const GEOM_EPS: f64 = 1e-9;

/// Geometry of an equirectangular lat-lon raster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Latitude of the northernmost row centre, degrees.
    pub lat_start: f64,
    /// Row spacing in degrees; negative (rows go south).
    pub lat_step: f64,
    pub lon_start: f64,
    /// Column spacing in degrees; positive (columns go east).
    pub lon_step: f64,
}

impl Grid {
    pub fn new(
        n_lat: usize,
        n_lon: usize,
        lat_start: f64,
        lat_step: f64,
        lon_start: f64,
        lon_step: f64,
    ) -> Result<Self> {
        let grid = Grid { n_lat, n_lon, lat_start, lat_step, lon_start, lon_step };
        grid.validate()?;
        Ok(grid)
    }

    /// Global grid with `n_lat` rows spanning pole to pole inclusive.
    pub fn global_with_poles(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 {
            return Err(Error::InvalidGrid { field: "n_lat", reason: "must be >= 2".into() });
        }
        Grid::new(n_lat, n_lon, 90.0, -180.0 / (n_lat - 1) as f64, 0.0, 360.0 / n_lon as f64)
    }

    /// Global grid with cell-centred rows that never touch the poles.
    pub fn global_cell_centred(n_lat: usize, n_lon: usize) -> Result<Self> {
        if n_lat < 2 {
            return Err(Error::InvalidGrid { field: "n_lat", reason: "must be >= 2".into() });
        }
        let step = 180.0 / n_lat as f64;
        Grid::new(n_lat, n_lon, 90.0 - step / 2.0, -step, 0.0, 360.0 / n_lon as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| {
            Err(Error::InvalidGrid { field, reason: reason.to_string() })
        };
        if self.n_lat < 2 {
            return bad("n_lat", "must be >= 2");
        }
        if self.n_lon < 2 {
            return bad("n_lon", "must be >= 2");
        }
        if !self.lat_step.is_finite() || self.lat_step == 0.0 {
            return bad("lat_step", "must be finite and nonzero");
        }
        if self.lat_step > 0.0 {
            return bad("lat_step", "must be negative (rows run north to south)");
        }
        if !self.lon_step.is_finite() || self.lon_step <= 0.0 {
            return bad("lon_step", "must be finite and positive");
        }
        if !self.lat_start.is_finite() || self.lat_start > 90.0 + GEOM_EPS {
            return bad("lat_start", "must lie in [-90, 90]");
        }
        let lat_end = self.lat_start + (self.n_lat - 1) as f64 * self.lat_step;
        if lat_end < -90.0 - GEOM_EPS {
            return bad("lat_step", "last row falls south of -90");
        }
        if !self.lon_start.is_finite() || !(0.0..360.0).contains(&self.lon_start) {
            return bad("lon_start", "must lie in [0, 360)");
        }
        if self.n_lon as f64 * self.lon_step > 360.0 + GEOM_EPS {
            return bad("lon_step", "columns overlap after wrapping 360 degrees");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_lat * self.n_lon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_lat, self.n_lon)
    }

    /// Latitude of row `r`, clamped to [-90, 90] against rounding.
    pub fn lat(&self, row: usize) -> f64 {
        (self.lat_start + row as f64 * self.lat_step).clamp(-90.0, 90.0)
    }

    /// Longitude of column `c`, wrapped into [0, 360).
    pub fn lon(&self, col: usize) -> f64 {
        let lon = (self.lon_start + col as f64 * self.lon_step).rem_euclid(360.0);
        if lon >= 360.0 {
            0.0
        } else {
            lon
        }
    }

    pub fn lats(&self) -> Vec<f64> {
        (0..self.n_lat).map(|r| self.lat(r)).collect()
    }

    pub fn lons(&self) -> Vec<f64> {
        (0..self.n_lon).map(|c| self.lon(c)).collect()
    }

    /// Whether the columns span the full circle, so that zonal wrapping is exact.
    pub fn is_zonally_global(&self) -> bool {
        (self.n_lon as f64 * self.lon_step - 360.0).abs() < 1e-6
    }
}

/// Convenience wrapper matching the grid constructor's argument order.
pub fn make_grid(
    n_lat: usize,
    n_lon: usize,
    lat_start: f64,
    lat_step: f64,
    lon_start: f64,
    lon_step: f64,
) -> Result<Grid> {
    Grid::new(n_lat, n_lon, lat_start, lat_step, lon_start, lon_step)
}

/// A single 2-D raster on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "raster has {} values, grid {}x{} needs {}",
                values.len(),
                grid.n_lat,
                grid.n_lon,
                grid.len()
            )));
        }
        Ok(Field { grid, values })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        Field { grid, values: vec![value; grid.len()] }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for r in 0..grid.n_lat {
            for c in 0..grid.n_lon {
                values.push(f(r, c));
            }
        }
        Field { grid, values }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.n_lon + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.grid.n_lon + col] = value;
    }

    /// Fails on the first NaN or infinity.
    pub fn validate_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::arg(
                "field",
                format!(
                    "non-finite value at row {}, col {}",
                    i / self.grid.n_lon,
                    i % self.grid.n_lon
                ),
            )),
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64
    }

    pub(crate) fn ensure_same_grid(&self, other: &Field) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::ShapeMismatch(format!(
                "grids differ: {}x{} vs {}x{}",
                self.grid.n_lat, self.grid.n_lon, other.grid.n_lat, other.grid.n_lon
            )));
        }
        Ok(())
    }
}

/// Nonnegative per-gridpoint weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl WeightField {
    pub fn uniform(grid: Grid) -> Self {
        WeightField { grid, values: vec![1.0; grid.len()] }
    }

    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::ShapeMismatch("weight raster does not match grid".into()));
        }
        if values.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::arg("weights", "must be finite and nonnegative"));
        }
        Ok(WeightField { grid, values })
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `max(cos(lat), 0)` per row; exactly zero on the poles.
pub fn cos_lat_weights(grid: &Grid) -> WeightField {
    let mut values = Vec::with_capacity(grid.len());
    for r in 0..grid.n_lat {
        let lat = grid.lat(r);
        let w = if lat.abs() >= 90.0 { 0.0 } else { lat.to_radians().cos().max(0.0) };
        values.extend(std::iter::repeat_n(w, grid.n_lon));
    }
    WeightField { grid: *grid, values }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PadMode {
    #[default]
    EdgeReplicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub row_offset: usize,
    pub col_offset: usize,
    /// `tile_size * tile_size` values, row-major.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileSet {
    pub tiles: Vec<Tile>,
    pub tile_size: usize,
    pub pad_mode: PadMode,
    pub source_grid: Grid,
}

impl TileSet {
    /// Padded raster dimensions (rows, cols).
    pub fn padded_shape(&self) -> (usize, usize) {
        (
            self.source_grid.n_lat.div_ceil(self.tile_size) * self.tile_size,
            self.source_grid.n_lon.div_ceil(self.tile_size) * self.tile_size,
        )
    }
}

/// Edge-pads `field` to multiples of `tile_size` and cuts it into
/// non-overlapping square tiles, ordered row-major by offset.
pub fn tile_field(field: &Field, tile_size: usize, pad_mode: PadMode) -> Result<TileSet> {
    if tile_size < 8 {
        return Err(Error::arg("tile_size", "must be >= 8"));
    }
    let (rows, cols) = field.grid.shape();
    if tile_size > 2 * rows.max(cols) {
        return Err(Error::arg(
            "tile_size",
            format!("{tile_size} exceeds twice the largest raster dimension ({})", rows.max(cols)),
        ));
    }
    let tiles_r = rows.div_ceil(tile_size);
    let tiles_c = cols.div_ceil(tile_size);
    let mut tiles = Vec::with_capacity(tiles_r * tiles_c);
    for tr in 0..tiles_r {
        for tc in 0..tiles_c {
            let (r0, c0) = (tr * tile_size, tc * tile_size);
            let mut values = Vec::with_capacity(tile_size * tile_size);
            for r in r0..r0 + tile_size {
                let src_r = r.min(rows - 1);
                for c in c0..c0 + tile_size {
                    let src_c = match pad_mode {
                        PadMode::EdgeReplicate => c.min(cols - 1),
                    };
                    values.push(field.values[src_r * cols + src_c]);
                }
            }
            tiles.push(Tile { row_offset: r0, col_offset: c0, values });
        }
    }
    Ok(TileSet { tiles, tile_size, pad_mode, source_grid: field.grid })
}

/// Reassembles a tile set and crops the padding.
pub fn untile(set: &TileSet) -> Result<Field> {
    let ts = set.tile_size;
    if ts == 0 {
        return Err(Error::arg("tile_size", "must be positive"));
    }
    let (pr, pc) = set.padded_shape();
    let (tiles_r, tiles_c) = (pr / ts, pc / ts);
    let mut seen = vec![false; tiles_r * tiles_c];
    let grid = set.source_grid;
    let mut out = vec![0.0; grid.len()];
    for tile in &set.tiles {
        if tile.row_offset % ts != 0 || tile.col_offset % ts != 0 {
            return Err(Error::ShapeMismatch(format!(
                "tile offset ({}, {}) not aligned to tile size {ts}",
                tile.row_offset, tile.col_offset
            )));
        }
        let (tr, tc) = (tile.row_offset / ts, tile.col_offset / ts);
        if tr >= tiles_r || tc >= tiles_c {
            return Err(Error::ShapeMismatch(format!(
                "tile offset ({}, {}) outside padded raster {pr}x{pc}",
                tile.row_offset, tile.col_offset
            )));
        }
        if tile.values.len() != ts * ts {
            return Err(Error::ShapeMismatch("tile raster has wrong length".into()));
        }
        let slot = &mut seen[tr * tiles_c + tc];
        if *slot {
            return Err(Error::ShapeMismatch(format!(
                "duplicate tile at offset ({}, {})",
                tile.row_offset, tile.col_offset
            )));
        }
        *slot = true;
        for lr in 0..ts {
            let r = tile.row_offset + lr;
            if r >= grid.n_lat {
                break;
            }
            for lc in 0..ts {
                let c = tile.col_offset + lc;
                if c >= grid.n_lon {
                    break;
                }
                out[r * grid.n_lon + c] = tile.values[lr * ts + lc];
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::ShapeMismatch("tile set leaves gaps in the raster".into()));
    }
    Ok(Field { grid, values: out })
}

/// How the latitude (row) axis is extended past its edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatBoundary {
    Replicate,
    Periodic,
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

#[inline]
fn lat_index(i: isize, n: usize, boundary: LatBoundary) -> usize {
    match boundary {
        LatBoundary::Replicate => i.clamp(0, n as isize - 1) as usize,
        LatBoundary::Periodic => wrap(i, n),
    }
}

/// Applies a symmetric 1-D kernel along longitude (periodic) and then along
/// latitude. With `adjoint` set the transpose operator is applied instead,
/// which differs from the forward operator only under edge replication.
pub(crate) fn separable_filter(
    values: &[f64],
    rows: usize,
    cols: usize,
    kernel: &[f64],
    lat_boundary: LatBoundary,
    adjoint: bool,
) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    // zonal pass, periodic: forward and adjoint coincide for symmetric kernels
    let mut zonal = vec![0.0; rows * cols];
    par::for_each_chunk_mut(&mut zonal, cols, |r, out_row| {
        let in_row = &values[r * cols..(r + 1) * cols];
        for (c, out) in out_row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * in_row[wrap(c as isize + k as isize - radius, cols)];
            }
            *out = acc;
        }
    });
    let mut out = vec![0.0; rows * cols];
    if !adjoint || lat_boundary == LatBoundary::Periodic {
        par::for_each_chunk_mut(&mut out, cols, |r, out_row| {
            for (k, w) in kernel.iter().enumerate() {
                let src = lat_index(r as isize + k as isize - radius, rows, lat_boundary);
                let in_row = &zonal[src * cols..(src + 1) * cols];
                for (o, v) in out_row.iter_mut().zip(in_row) {
                    *o += w * v;
                }
            }
        });
    } else {
        // transpose of the clamped gather is a scatter
        for r in 0..rows {
            for (k, w) in kernel.iter().enumerate() {
                let dst = lat_index(r as isize + k as isize - radius, rows, lat_boundary);
                for c in 0..cols {
                    out[dst * cols + c] += w * zonal[r * cols + c];
                }
            }
        }
    }
    out
}

/// Normalised discrete Gaussian truncated at `ceil(4 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    kernel
}

/// Separable Gaussian blur; longitudes wrap and latitudes edge-replicate.
pub fn gaussian_blur(field: &Field, sigma: f64) -> Result<Field> {
    gaussian_blur_with(field, sigma, LatBoundary::Replicate)
}

/// Gaussian blur with an explicit latitude boundary policy.
pub fn gaussian_blur_with(field: &Field, sigma: f64, lat_boundary: LatBoundary) -> Result<Field> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg("sigma", format!("must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(field.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let (rows, cols) = field.grid.shape();
    let values = separable_filter(&field.values, rows, cols, &kernel, lat_boundary, false);
    Ok(Field { grid: field.grid, values })
}

fn box_kernel(window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::arg("window", format!("must be odd and >= 1, got {window}")));
    }
    Ok(vec![1.0 / window as f64; window])
}

/// Box mean over `window x window` cells (longitude periodic, latitude replicated).
pub fn neighborhood_mean(field: &Field, window: usize) -> Result<Field> {
    let kernel = box_kernel(window)?;
    if window == 1 {
        return Ok(field.clone());
    }
    let (rows, cols) = field.grid.shape();
    let values =
        separable_filter(&field.values, rows, cols, &kernel, LatBoundary::Replicate, false);
    Ok(Field { grid: field.grid, values })
}

/// Transpose of [`neighborhood_mean`] on a raw raster; used by loss gradients.
pub(crate) fn neighborhood_mean_adjoint(
    values: &[f64],
    rows: usize,
    cols: usize,
    window: usize,
) -> Result<Vec<f64>> {
    let kernel = box_kernel(window)?;
    if window == 1 {
        return Ok(values.to_vec());
    }
    Ok(separable_filter(values, rows, cols, &kernel, LatBoundary::Replicate, true))
}

/// Raw-raster forward box mean, sharing the kernel path with the adjoint.
pub(crate) fn neighborhood_mean_raw(
    values: &[f64],
    rows: usize,
    cols: usize,
    window: usize,
) -> Result<Vec<f64>> {
    let kernel = box_kernel(window)?;
    if window == 1 {
        return Ok(values.to_vec());
    }
    Ok(separable_filter(values, rows, cols, &kernel, LatBoundary::Replicate, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid(rows: usize, cols: usize) -> Grid {
        Grid::global_cell_centred(rows, cols).unwrap()
    }

    #[test]
    fn quarter_degree_layout_grid() {
        let g = make_grid(721, 1440, 90.0, -0.25, 0.0, 0.25).unwrap();
        assert_eq!(g.len(), 721 * 1440);
        assert_eq!(g.lat(0), 90.0);
        assert_eq!(g.lat(720), -90.0);
        assert_eq!(g.lon(1439), 359.75);
    }

    #[test]
    fn degenerate_two_by_two() {
        let g = make_grid(2, 2, 90.0, -180.0, 0.0, 180.0).unwrap();
        assert_eq!(g.lats(), vec![90.0, -90.0]);
        assert_eq!(g.lons(), vec![0.0, 180.0]);
    }

    #[test]
    fn one_degree_grid_equator_row() {
        let g = make_grid(181, 360, 90.0, -1.0, 0.0, 1.0).unwrap();
        assert_eq!(g.lat(90), 0.0);
        assert_eq!(g.lat(45), 45.0);
        assert_eq!(g.lon(90), 90.0);
    }

    #[test]
    fn invalid_grids_name_the_field() {
        let cases = [
            (make_grid(1, 10, 90.0, -1.0, 0.0, 1.0), "n_lat"),
            (make_grid(10, 1, 90.0, -1.0, 0.0, 1.0), "n_lon"),
            (make_grid(10, 10, 90.0, 0.0, 0.0, 1.0), "lat_step"),
            (make_grid(10, 10, 90.0, -1.0, 0.0, 0.0), "lon_step"),
            (make_grid(10, 10, 95.0, -1.0, 0.0, 1.0), "lat_start"),
            (make_grid(200, 10, 90.0, -1.0, 0.0, 1.0), "lat_step"),
            (make_grid(10, 10, 90.0, -1.0, 360.0, 1.0), "lon_start"),
            (make_grid(10, 400, 90.0, -1.0, 0.0, 1.0), "lon_step"),
        ];
        for (res, name) in cases {
            match res {
                Err(Error::InvalidGrid { field, .. }) => assert_eq!(field, name),
                other => panic!("expected InvalidGrid({name}), got {other:?}"),
            }
        }
    }

    #[test]
    fn cos_lat_weight_values() {
        let g = make_grid(181, 360, 90.0, -1.0, 0.0, 1.0).unwrap();
        let w = cos_lat_weights(&g);
        assert_eq!(w.values[90 * 360], 1.0);
        assert_eq!(w.values[0], 0.0);
        assert_eq!(w.values[180 * 360 + 7], 0.0);
        assert_abs_diff_eq!(w.values[30 * 360 + 11], 0.5, epsilon = 1e-12);
        for r in 0..g.n_lat {
            let row = &w.values[r * 360..(r + 1) * 360];
            assert!(row.iter().all(|v| *v == row[0]));
            assert!((0.0..=1.0).contains(&row[0]));
            assert_eq!(row[0], w.values[(180 - r) * 360]);
        }
    }

    #[test]
    fn tiling_counts() {
        let g = make_grid(721, 1440, 90.0, -0.25, 0.0, 0.25).unwrap();
        let f = Field::zeros(g);
        let t = tile_field(&f, 256, PadMode::EdgeReplicate).unwrap();
        assert_eq!(t.padded_shape(), (768, 1536));
        assert_eq!(t.tiles.len(), 18);

        let g = grid(256, 256);
        let t = tile_field(&Field::zeros(g), 256, PadMode::EdgeReplicate).unwrap();
        assert_eq!(t.tiles.len(), 1);
        assert_eq!(t.padded_shape(), (256, 256));
    }

    #[test]
    fn small_tiling_replicates_edges() {
        let g = grid(10, 10);
        let f = Field::from_fn(g, |r, c| (r * 10 + c) as f64);
        let t = tile_field(&f, 8, PadMode::EdgeReplicate).unwrap();
        assert_eq!(t.tiles.len(), 4);
        assert_eq!(t.padded_shape(), (16, 16));
        let last = &t.tiles[3];
        assert_eq!((last.row_offset, last.col_offset), (8, 8));
        // padded rows 10..16 copy row 9, padded cols copy col 9
        assert_eq!(last.values[7 * 8 + 7], f.get(9, 9));
        assert_eq!(last.values[7 * 8], f.get(9, 8));
        assert_eq!(untile(&t).unwrap(), f);
    }

    #[test]
    fn tiling_rejects_bad_sizes() {
        let f = Field::zeros(grid(10, 10));
        assert!(tile_field(&f, 4, PadMode::EdgeReplicate).is_err());
        assert!(tile_field(&f, 21, PadMode::EdgeReplicate).is_err());
        assert!(tile_field(&f, 20, PadMode::EdgeReplicate).is_ok());
    }

    #[test]
    fn untile_rejects_inconsistent_offsets() {
        let f = Field::from_fn(grid(16, 16), |r, c| (r + c) as f64);
        let mut t = tile_field(&f, 8, PadMode::EdgeReplicate).unwrap();
        t.tiles[1].col_offset = 3;
        assert!(matches!(untile(&t), Err(Error::ShapeMismatch(_))));

        let mut t = tile_field(&f, 8, PadMode::EdgeReplicate).unwrap();
        t.tiles.pop();
        assert!(untile(&t).is_err());

        let mut t = tile_field(&f, 8, PadMode::EdgeReplicate).unwrap();
        t.tiles[3] = t.tiles[0].clone();
        assert!(untile(&t).is_err());
    }

    #[test]
    fn blur_identity_and_constant() {
        let g = grid(12, 20);
        let f = Field::from_fn(g, |r, c| (r * 31 + c * 7) as f64 % 5.0);
        assert_eq!(gaussian_blur(&f, 0.0).unwrap(), f);
        let k = Field::filled(g, 3.25);
        for s in [0.5, 1.0, 2.0, 7.0] {
            let b = gaussian_blur(&k, s).unwrap();
            for v in b.values {
                assert_abs_diff_eq!(v, 3.25, epsilon = 1e-12);
            }
        }
        assert!(gaussian_blur(&f, -1.0).is_err());
        assert!(gaussian_blur(&f, f64::NAN).is_err());
    }

    #[test]
    fn blur_impulse_matches_kernel_table() {
        // independent kernel table: unnormalised exp(-x^2/2) on [-4, 4], normalised
        let raw: Vec<f64> = (-4..=4).map(|x: i32| (-(x * x) as f64 / 2.0).exp()).collect();
        let norm: f64 = raw.iter().sum();
        let centre_weight = (1.0 / norm) * (1.0 / norm);

        let g = grid(21, 21);
        let mut f = Field::zeros(g);
        f.set(10, 10, 1.0);
        let b = gaussian_blur(&f, 1.0).unwrap();
        assert_abs_diff_eq!(b.get(10, 10), centre_weight, epsilon = 1e-15);
        assert_abs_diff_eq!(b.get(10, 12), raw[6] / norm / norm, epsilon = 1e-15);
    }

    #[test]
    fn neighborhood_mean_cases() {
        let g = grid(5, 5);
        let mut f = Field::zeros(g);
        f.set(2, 2, 1.0);
        assert_eq!(neighborhood_mean(&f, 1).unwrap(), f);
        let m = neighborhood_mean(&f, 3).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                let expect = if (1..=3).contains(&r) && (1..=3).contains(&c) { 1.0 / 9.0 } else { 0.0 };
                assert_abs_diff_eq!(m.get(r, c), expect, epsilon = 1e-15);
            }
        }
        let k = Field::filled(g, -2.0);
        for v in neighborhood_mean(&k, 5).unwrap().values {
            assert_abs_diff_eq!(v, -2.0, epsilon = 1e-14);
        }
        assert!(neighborhood_mean(&f, 2).is_err());
        assert!(neighborhood_mean(&f, 0).is_err());
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let (rows, cols) = (6, 7);
        let x: Vec<f64> = (0..42).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..42).map(|i| ((i * 13) % 7) as f64 * 0.5).collect();
        for window in [1, 3, 5, 9] {
            let ax = neighborhood_mean_raw(&x, rows, cols, window).unwrap();
            let aty = neighborhood_mean_adjoint(&y, rows, cols, window).unwrap();
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        }
    }
}
