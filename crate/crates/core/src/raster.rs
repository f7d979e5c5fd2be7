//! Point-cloud rasterization into per-cell height statistics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{overhead_extrinsic, CameraCalibration, Mat3, Modality, RigidTransform, Vec3};
use crate::scalar::Scalar;

/// Number of statistics channels per cell: mean, variance, max, min of z.
pub const STAT_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub sensor_id: String,
    pub timestamp: f64,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, sensor_id: impl Into<String>, timestamp: f64) -> Self {
        Self {
            points,
            sensor_id: sensor_id.into(),
            timestamp,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The same cloud with every point mapped through `tf`.
    pub fn transformed(&self, tf: &RigidTransform) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| {
                let q = tf.apply(&Vec3::new(p[0], p[1], p[2]));
                [q.x, q.y, q.z]
            })
            .collect();
        Self {
            points,
            sensor_id: self.sensor_id.clone(),
            timestamp: self.timestamp,
        }
    }
}

/// Grid layout: point `(x, y)` falls in cell
/// `(floor((x - x0) / d), floor((y - y0) / d))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub cell_size: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub origin: (f64, f64),
}

impl RasterConfig {
    /// Grid of `grid_h x grid_w` cells centered on the origin.
    pub fn centered(grid_h: usize, grid_w: usize, cell_size: f64) -> Self {
        Self {
            cell_size,
            grid_h,
            grid_w,
            origin: (-(grid_h as f64) * cell_size / 2.0, -(grid_w as f64) * cell_size / 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config(format!("invalid raster config {self:?}")));
        }
        Ok(())
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let i = ((x - self.origin.0) / self.cell_size).floor();
        let j = ((y - self.origin.1) / self.cell_size).floor();
        if i >= 0.0 && j >= 0.0 && i < self.grid_h as f64 && j < self.grid_w as f64 {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }
}

/// `H x W x 4` statistics grid plus an occupancy mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoImage {
    pub h: usize,
    pub w: usize,
    /// Row-major `(row, col, channel)`, channels `(mean, var, max, min)`.
    pub cells: Vec<f64>,
    pub occupancy: Vec<u8>,
    /// Points outside the grid.
    pub dropped: usize,
}

impl PseudoImage {
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            cells: vec![0.0; h * w * STAT_CHANNELS],
            occupancy: vec![0; h * w],
            dropped: 0,
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> [f64; STAT_CHANNELS] {
        let base = (row * self.w + col) * STAT_CHANNELS;
        let mut out = [0.0; STAT_CHANNELS];
        out.copy_from_slice(&self.cells[base..base + STAT_CHANNELS]);
        out
    }

    pub fn occupied(&self, row: usize, col: usize) -> bool {
        self.occupancy[row * self.w + col] != 0
    }

    /// Channel-first `[5, H, W]` tensor: statistics divided by `z_scale`
    /// (variance by its square) followed by the occupancy mask.
    pub fn to_tensor<T: Scalar>(&self, z_scale: f64) -> Result<Tensor<T>> {
        let n = self.h * self.w;
        let mut data = vec![T::zero(); (STAT_CHANNELS + 1) * n];
        let scales = [z_scale, z_scale * z_scale, z_scale, z_scale];
        for p in 0..n {
            for (ch, s) in scales.iter().enumerate() {
                data[ch * n + p] = T::from_f64_lossy(self.cells[p * STAT_CHANNELS + ch] / s);
            }
            data[STAT_CHANNELS * n + p] = T::from_f64_lossy(self.occupancy[p] as f64);
        }
        Tensor::from_vec(data, &[STAT_CHANNELS + 1, self.h, self.w])
    }
}

/// Compensated sum of `values` in the given order.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Population statistics of a cell's heights, which must be sorted
/// ascending so the result is independent of input order.
pub fn cell_statistics(sorted_z: &[f64]) -> [f64; STAT_CHANNELS] {
    let n = sorted_z.len() as f64;
    let mean = kahan_sum(sorted_z.iter().copied()) / n;
    let var = kahan_sum(sorted_z.iter().map(|z| (z - mean) * (z - mean))) / n;
    [mean, var, sorted_z[sorted_z.len() - 1], sorted_z[0]]
}

/// Aggregates a point cloud into per-cell `(mean, var, max, min)` of `z`.
pub fn rasterize(pcd: &PointCloud, cfg: &RasterConfig) -> Result<PseudoImage> {
    cfg.validate()?;
    let mut img = PseudoImage::empty(cfg.grid_h, cfg.grid_w);
    // Bucket heights by cell index with a counting sort.
    let mut index = Vec::with_capacity(pcd.points.len());
    let mut counts = vec![0usize; cfg.grid_h * cfg.grid_w + 1];
    for p in &pcd.points {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("point cloud"));
        }
        match cfg.cell_of(p[0], p[1]) {
            Some((i, j)) => {
                let k = i * cfg.grid_w + j;
                index.push((k, p[2]));
                counts[k + 1] += 1;
            }
            None => img.dropped += 1,
        }
    }
    for k in 1..counts.len() {
        counts[k] += counts[k - 1];
    }
    let mut fill = counts.clone();
    let mut zs = vec![0.0; index.len()];
    for &(k, z) in &index {
        zs[fill[k]] = z;
        fill[k] += 1;
    }
    for k in 0..cfg.grid_h * cfg.grid_w {
        let bucket = &mut zs[counts[k]..counts[k + 1]];
        if bucket.is_empty() {
            continue;
        }
        bucket.sort_by(f64::total_cmp);
        let stats = cell_statistics(bucket);
        img.cells[k * STAT_CHANNELS..(k + 1) * STAT_CHANNELS].copy_from_slice(&stats);
        img.occupancy[k] = 1;
    }
    Ok(img)
}

/// Rasterizes clouds indexed `[time][sensor]`; the result has the same
/// layout.
pub fn rasterize_batch(clouds: &[Vec<PointCloud>], cfg: &RasterConfig) -> Result<Vec<Vec<PseudoImage>>> {
    let sensors = clouds.first().map_or(0, Vec::len);
    if clouds.iter().any(|row| row.len() != sensors) {
        let lens: Vec<usize> = clouds.iter().map(Vec::len).collect();
        return Err(Error::shape(
            "rasterize_batch",
            format!("ragged sensor counts {lens:?}"),
        ));
    }
    clouds
        .par_iter()
        .map(|row| row.iter().map(|c| rasterize(c, cfg)).collect())
        .collect()
}

/// Overhead pseudo-camera for a pseudo-image rasterized with `cfg`.
/// A cell's ray points along the normalized map position of its center,
/// `(x / half_extent, y / half_extent, -1)`, matching the map query rays.
pub fn pseudo_camera_calibration(
    cfg: &RasterConfig,
    half_extent: f64,
    view_id: impl Into<String>,
) -> Result<CameraCalibration> {
    cfg.validate()?;
    let f = half_extent / cfg.cell_size;
    let k = Mat3::new(
        f,
        0.0,
        -cfg.origin.1 / cfg.cell_size,
        0.0,
        f,
        -cfg.origin.0 / cfg.cell_size,
        0.0,
        0.0,
        1.0,
    );
    CameraCalibration::new(
        view_id,
        Modality::LidarPseudo,
        k,
        overhead_extrinsic(),
        Vec3::new(0.0, 0.0, 1.0),
    )
}

/// Parses whitespace-separated `x y z` lines; blank lines and `#` comments
/// are skipped.
pub fn parse_xyz(text: &str, sensor_id: &str, timestamp: f64) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Dataset(format!("line {}: {e}", lineno + 1)))?;
        let [x, y, z] = vals[..] else {
            return Err(Error::Dataset(format!(
                "line {}: expected 3 values, got {}",
                lineno + 1,
                vals.len()
            )));
        };
        points.push([x, y, z]);
    }
    Ok(PointCloud::new(points, sensor_id, timestamp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_cfg() -> RasterConfig {
        RasterConfig {
            cell_size: 1.0,
            grid_h: 4,
            grid_w: 4,
            origin: (0.0, 0.0),
        }
    }

    #[test]
    fn empty_cloud_is_all_zero() {
        let img = rasterize(&PointCloud::new(vec![], "l", 0.0), &unit_cfg()).unwrap();
        assert!(img.cells.iter().all(|&v| v == 0.0));
        assert!(img.occupancy.iter().all(|&v| v == 0));
    }

    #[test]
    fn two_point_cell_statistics() {
        let pcd = PointCloud::new(vec![[0.1, 0.2, 1.0], [0.3, 0.4, 3.0]], "l", 0.0);
        let img = rasterize(&pcd, &unit_cfg()).unwrap();
        assert_eq!(img.cell(0, 0), [2.0, 1.0, 3.0, 1.0]);
        assert!(img.occupied(0, 0) && !img.occupied(0, 1));
    }

    #[test]
    fn single_point_and_dropped() {
        let pcd = PointCloud::new(vec![[2.5, 1.5, 5.0], [9.0, 0.0, 1.0], [-0.1, 0.0, 1.0]], "l", 0.0);
        let img = rasterize(&pcd, &unit_cfg()).unwrap();
        assert_eq!(img.cell(2, 1), [5.0, 0.0, 5.0, 5.0]);
        assert_eq!(img.dropped, 2);
    }

    #[test]
    fn batch_matches_single_calls_and_rejects_ragged() {
        let a = PointCloud::new(vec![[0.5, 0.5, 1.0]], "a", 0.0);
        let b = PointCloud::new(vec![[1.5, 3.5, 2.0]], "b", 0.0);
        let out = rasterize_batch(&[vec![a.clone(), b.clone()], vec![b.clone(), a.clone()]], &unit_cfg()).unwrap();
        assert_eq!(out[1][0], rasterize(&b, &unit_cfg()).unwrap());
        assert!(rasterize_batch(&[vec![a.clone()], vec![a, b]], &unit_cfg()).is_err());
    }

    #[test]
    fn centered_grid_puts_origin_in_middle() {
        let cfg = RasterConfig::centered(10, 10, 2.0);
        assert_eq!(cfg.cell_of(0.0, 0.0), Some((5, 5)));
        assert_eq!(cfg.cell_of(-0.1, -0.1), Some((4, 4)));
        assert_eq!(cfg.cell_of(10.0, 0.0), None);
    }

    #[test]
    fn parse_xyz_lines() {
        let pcd = parse_xyz("# header\n1 2 3\n\n4.5 -1 0\n", "s", 0.0).unwrap();
        assert_eq!(pcd.points, vec![[1.0, 2.0, 3.0], [4.5, -1.0, 0.0]]);
        assert!(parse_xyz("1 2\n", "s", 0.0).is_err());
    }

    #[test]
    fn tensor_layout() {
        let pcd = PointCloud::new(vec![[0.5, 1.5, 2.0]], "l", 0.0);
        let img = rasterize(&pcd, &unit_cfg()).unwrap();
        let t = img.to_tensor::<f64>(2.0).unwrap();
        assert_eq!(t.shape(), &[5, 4, 4]);
        let v = t.to_vec();
        assert_eq!(v[1], 1.0);
        assert_eq!(v[4 * 16 + 1], 1.0);
        assert_eq!(v[4 * 16], 0.0);
    }

    #[test]
    fn pseudo_camera_rays_point_at_cell_centers() {
        let cfg = RasterConfig::centered(10, 10, 6.0);
        let cal = pseudo_camera_calibration(&cfg, 30.0, "lidar").unwrap();
        let rays = cal.grid_rays(10, 10).unwrap();
        // Row 7, column 2: center at x = -30 + 7.5 * 6, y = -30 + 2.5 * 6.
        let (x, y) = (15.0 / 30.0, -15.0 / 30.0);
        let want = Vec3::new(x, y, -1.0).normalize();
        assert!((rays[7 * 10 + 2] - want).norm() < 1e-12);
    }
}
