//! Six-channel bird's-eye-view encoding and the occupancy integral image.
//!
//! Grid layout: columns run along LIDAR `y` (lateral), rows along LIDAR `x`
//! (forward). At the default extents this is 800 columns by 700 rows. Cell
//! membership uses floor semantics on `(coord - min) / resolution`, so a point
//! on an interior boundary belongs to the cell above it and extents are
//! half-open `[min, max)`.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::FeatureMap;
use crate::kitti_io::{GroundPlane, LidarPoint, PointCloud};

pub const DEFAULT_RESOLUTION: f64 = 0.1;
pub const DEFAULT_SLICE_RANGE: (f64, f64) = (0.0, 2.5);
pub const DEFAULT_SLICES: usize = 5;

/// BEV crop in LIDAR coordinates: `x` forward, `y` lateral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevExtents {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Default for BevExtents {
    fn default() -> Self {
        Self { x: (0.0, 70.0), y: (-40.0, 40.0) }
    }
}

impl BevExtents {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && hi > lo;
        if ok(self.x) && ok(self.y) {
            Ok(())
        } else {
            Err(Error::Parameter(format!("extents {self:?} are not well ordered")))
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x.0..self.x.1).contains(&x) && (self.y.0..self.y.1).contains(&y)
    }
}

fn cells_along(lo: f64, hi: f64, resolution: f64) -> usize {
    // round half up
    ((hi - lo) / resolution + 0.5).floor() as usize
}

/// Extents plus resolution; defines the cell lattice shared by the BEV map
/// and the occupancy integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub extents: BevExtents,
    pub resolution: f64,
    /// Cells along `y`.
    pub width: usize,
    /// Cells along `x`.
    pub height: usize,
}

/// Half-open cell rectangle `[col0, col1) x [row0, row1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub col0: usize,
    pub row0: usize,
    pub col1: usize,
    pub row1: usize,
}

impl CellRect {
    pub fn is_empty(&self) -> bool {
        self.col1 <= self.col0 || self.row1 <= self.row0
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        (self.col0..self.col1).contains(&col) && (self.row0..self.row1).contains(&row)
    }
}

impl BevGrid {
    pub fn new(extents: BevExtents, resolution: f64) -> Result<Self> {
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::Parameter(format!("resolution must be positive, got {resolution}")));
        }
        extents.validate()?;
        Ok(Self {
            extents,
            resolution,
            width: cells_along(extents.y.0, extents.y.1, resolution),
            height: cells_along(extents.x.0, extents.x.1, resolution),
        })
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    /// `(col, row)` of a LIDAR `(x, y)`, or `None` outside the grid.
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.extents.contains(x, y) {
            return None;
        }
        let col = ((y - self.extents.y.0) / self.resolution).floor() as usize;
        let row = ((x - self.extents.x.0) / self.resolution).floor() as usize;
        (col < self.width && row < self.height).then_some((col, row))
    }

    /// Cells overlapped by the footprint `[x_lo, x_hi] x [y_lo, y_hi]`,
    /// clamped to the grid.
    pub fn footprint_cells(&self, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> CellRect {
        let span = |lo: f64, hi: f64, min: f64, n: usize| {
            let a = ((lo - min) / self.resolution).floor().clamp(0.0, n as f64) as usize;
            let b = ((hi - min) / self.resolution).ceil().clamp(0.0, n as f64) as usize;
            (a, b.max(a))
        };
        let (col0, col1) = span(y_lo, y_hi, self.extents.y.0, self.width);
        let (row0, row1) = span(x_lo, x_hi, self.extents.x.0, self.height);
        CellRect { col0, row0, col1, row1 }
    }
}

/// Density channel value for `n` points in a cell.
pub fn density_value(n: u32) -> f64 {
    // log2 keeps powers of two exact: n = 3 gives 0.5, n = 15 gives 1.0
    (f64::from(n) + 1.0).log2().min(4.0) / 4.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub grid: BevGrid,
    /// `n_slices + 1` increasing bounds.
    pub slice_bounds: Vec<f64>,
    /// Channel-major `[channel][row][col]`.
    data: Vec<f64>,
}

impl BevMap {
    pub fn n_slices(&self) -> usize {
        self.slice_bounds.len() - 1
    }

    pub fn n_channels(&self) -> usize {
        self.n_slices() + 1
    }

    pub fn density_channel(&self) -> usize {
        self.n_slices()
    }

    #[inline]
    pub fn get(&self, channel: usize, col: usize, row: usize) -> f64 {
        self.data[channel * self.grid.num_cells() + row * self.grid.width + col]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.grid.num_cells();
        &self.data[channel * n..(channel + 1) * n]
    }

    /// `height x width x channels` feature map, rows along `x`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let (w, h, d) = (self.grid.width, self.grid.height, self.n_channels());
        let mut fm = FeatureMap::zeros(h, w, d);
        for c in 0..d {
            for (idx, &v) in self.channel(c).iter().enumerate() {
                fm.set(idx / w, idx % w, c, v);
            }
        }
        fm
    }
}

/// Replaces each point's `z` by its height above `plane` (plane in the LIDAR
/// frame).
pub fn heights_above_plane(cloud: &PointCloud, plane: &GroundPlane) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let h = plane.signed_distance([p.x as f64, p.y as f64, p.z as f64]);
            LidarPoint { z: h as f32, ..*p }
        })
        .collect();
    PointCloud { points }
}

/// Encodes `cloud` into `n_slices` max-height channels plus a density channel.
pub fn build_bev_map(
    cloud: &PointCloud,
    extents: BevExtents,
    resolution: f64,
    slice_range: (f64, f64),
    n_slices: usize,
) -> Result<BevMap> {
    let grid = BevGrid::new(extents, resolution)?;
    let (z_lo, z_hi) = slice_range;
    if !(z_lo.is_finite() && z_hi.is_finite() && z_hi > z_lo) {
        return Err(Error::Parameter(format!("slice range ({z_lo}, {z_hi}) is not well ordered")));
    }
    if n_slices == 0 {
        return Err(Error::Parameter("need at least one height slice".into()));
    }
    let slice_h = (z_hi - z_lo) / n_slices as f64;
    let slice_bounds: Vec<f64> = (0..=n_slices).map(|k| z_lo + slice_h * k as f64).collect();

    let n_cells = grid.num_cells();
    let mut data = vec![0.0; n_cells * (n_slices + 1)];
    let mut counts = vec![0u32; n_cells];
    for p in &cloud.points {
        let z = p.z as f64;
        if !(z_lo..=z_hi).contains(&z) {
            continue;
        }
        let Some((col, row)) = grid.cell_of(p.x as f64, p.y as f64) else {
            continue;
        };
        let cell = row * grid.width + col;
        let k = (((z - z_lo) / slice_h).floor() as usize).min(n_slices - 1);
        let h = (z - slice_bounds[k]).max(0.0);
        let slot = &mut data[k * n_cells + cell];
        if h > *slot {
            *slot = h;
        }
        counts[cell] += 1;
    }
    let density = &mut data[n_slices * n_cells..];
    for (d, &n) in density.iter_mut().zip(&counts) {
        *d = density_value(n);
    }
    Ok(BevMap { grid, slice_bounds, data })
}

/// Summed-area table of per-cell point counts, `(width + 1) x (height + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyIntegral {
    pub grid: BevGrid,
    /// `table[col * (height + 1) + row]`.
    table: Vec<u32>,
}

impl OccupancyIntegral {
    #[inline]
    pub fn at(&self, col: usize, row: usize) -> u32 {
        self.table[col * (self.grid.height + 1) + row]
    }

    pub fn total(&self) -> u32 {
        self.at(self.grid.width, self.grid.height)
    }

    /// Number of points in the half-open cell rectangle.
    pub fn area_sum(&self, rect: CellRect) -> Result<u32> {
        if rect.col0 > rect.col1
            || rect.row0 > rect.row1
            || rect.col1 > self.grid.width
            || rect.row1 > self.grid.height
        {
            return Err(Error::Parameter(format!("cell rectangle {rect:?} out of bounds")));
        }
        Ok(self.area_sum_unchecked(rect))
    }

    #[inline]
    pub(crate) fn area_sum_unchecked(&self, r: CellRect) -> u32 {
        // wrapping keeps intermediate underflow harmless; the result is exact
        self.at(r.col1, r.row1)
            .wrapping_sub(self.at(r.col0, r.row1))
            .wrapping_sub(self.at(r.col1, r.row0))
            .wrapping_add(self.at(r.col0, r.row0))
    }
}

/// Counts every point inside the extents (any height) per cell and builds the
/// summed-area table.
pub fn build_occupancy_integral(cloud: &PointCloud, extents: BevExtents, resolution: f64) -> Result<OccupancyIntegral> {
    let grid = BevGrid::new(extents, resolution)?;
    let stride = grid.height + 1;
    let mut table = vec![0u32; (grid.width + 1) * stride];
    for p in &cloud.points {
        if let Some((col, row)) = grid.cell_of(p.x as f64, p.y as f64) {
            table[(col + 1) * stride + row + 1] += 1;
        }
    }
    for col in 1..=grid.width {
        let mut running = 0u32;
        for row in 1..=grid.height {
            running += table[col * stride + row];
            table[col * stride + row] = running + table[(col - 1) * stride + row];
        }
    }
    Ok(OccupancyIntegral { grid, table })
}

/// Linear 16-bit quantization of one channel, rows flipped so forward is up.
pub fn channel_to_pgm(map: &BevMap, channel: usize, scale_max: f64) -> Vec<u8> {
    let (w, h) = (map.grid.width, map.grid.height);
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    out.reserve(w * h * 2);
    let data = map.channel(channel);
    for row in (0..h).rev() {
        for col in 0..w {
            let v = data[row * w + col];
            let q = if scale_max > 0.0 {
                (v / scale_max * 65535.0).round().clamp(0.0, 65535.0) as u16
            } else {
                0
            };
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    out
}

/// Full-scale value of each channel: slice thickness for height channels, 1
/// for density.
pub fn channel_scales(map: &BevMap) -> Vec<f64> {
    let mut scales: Vec<f64> = map.slice_bounds.windows(2).map(|w| w[1] - w[0]).collect();
    scales.push(1.0);
    scales
}

/// Writes `<stem>_ch<k>.pgm` for every channel plus `<stem>_scale.txt`.
pub fn write_bev_dump(map: &BevMap, dir: &Path, stem: &str) -> Result<()> {
    let scales = channel_scales(map);
    let mut sidecar = String::from("channel,kind,full_scale,units_per_level\n");
    for (c, &scale) in scales.iter().enumerate() {
        std::fs::write(dir.join(format!("{stem}_ch{c}.pgm")), channel_to_pgm(map, c, scale))?;
        let kind = if c == map.density_channel() { "density" } else { "max_height" };
        sidecar.push_str(&format!("{c},{kind},{scale},{}\n", scale / 65535.0));
    }
    let mut f = std::fs::File::create(dir.join(format!("{stem}_scale.txt")))?;
    f.write_all(sidecar.as_bytes())?;
    Ok(())
}
