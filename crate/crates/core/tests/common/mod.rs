//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use std::collections::HashSet;

use bevfuse::data::scene::{generate_scene, SceneSpec};
use bevfuse::diff::Tensor;
use bevfuse::geometry::{camera_extrinsic, intrinsic, BevGrid, CameraCalibration, Modality, Vec3};
use bevfuse::head::{iou_multiclass, predict_classes, ClassMap, NUM_CLASSES};
use bevfuse::raster::{PointCloud, RasterConfig};
use bevfuse::temporal::align_bev;
use rand::Rng;

/// Naive rasterizer: every cell scans the whole cloud.
pub struct OracleRaster {
    pub cells: Vec<f64>,
    pub occupancy: Vec<u8>,
    pub dropped: usize,
}

fn compensated(values: &[f64]) -> f64 {
    let (mut s, mut err) = (0.0f64, 0.0f64);
    for &v in values {
        let y = v - err;
        let t = s + y;
        err = (t - s) - y;
        s = t;
    }
    s
}

pub fn oracle_raster(cloud: &PointCloud, cfg: &RasterConfig) -> OracleRaster {
    let cell = |p: &[f64; 3]| {
        let i = ((p[0] - cfg.origin.0) / cfg.cell_size).floor();
        let j = ((p[1] - cfg.origin.1) / cfg.cell_size).floor();
        (i >= 0.0 && j >= 0.0 && i < cfg.grid_h as f64 && j < cfg.grid_w as f64).then_some((i as usize, j as usize))
    };
    let mut out = OracleRaster {
        cells: vec![0.0; cfg.grid_h * cfg.grid_w * 4],
        occupancy: vec![0; cfg.grid_h * cfg.grid_w],
        dropped: cloud.points.iter().filter(|p| cell(p).is_none()).count(),
    };
    for i in 0..cfg.grid_h {
        for j in 0..cfg.grid_w {
            let mut zs: Vec<f64> = cloud
                .points
                .iter()
                .filter(|p| cell(p) == Some((i, j)))
                .map(|p| p[2])
                .collect();
            if zs.is_empty() {
                continue;
            }
            zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = zs.len() as f64;
            let mean = compensated(&zs) / n;
            let sq: Vec<f64> = zs.iter().map(|z| (z - mean) * (z - mean)).collect();
            let k = i * cfg.grid_w + j;
            out.cells[k * 4..k * 4 + 4].copy_from_slice(&[mean, compensated(&sq) / n, zs[zs.len() - 1], zs[0]]);
            out.occupancy[k] = 1;
        }
    }
    out
}

pub fn random_cloud(rng: &mut impl Rng, n: usize, half: f64) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            [
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-5.0..15.0),
            ]
        })
        .collect();
    PointCloud::new(points, "lidar_test", 0.0)
}

/// A pinhole camera with random pose and focal length.
pub fn random_calibration(rng: &mut impl Rng) -> CameraCalibration {
    let f = rng.random_range(100.0..800.0);
    let k = intrinsic(
        f,
        f * rng.random_range(0.8..1.2),
        rng.random_range(100.0..400.0),
        rng.random_range(80.0..300.0),
    );
    let e = camera_extrinsic(rng.random_range(-3.1..3.1), rng.random_range(-0.5..0.5));
    let c = Vec3::new(
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(0.0..15.0),
    );
    CameraCalibration::new("cam", Modality::Rgb, k, e, c).unwrap()
}

/// A world point in front of `cal` at the given depth along a random
/// in-frustum pixel.
pub fn point_in_frustum(rng: &mut impl Rng, cal: &CameraCalibration) -> Vec3 {
    let (w, h) = (2.0 * cal.intrinsic[(0, 2)], 2.0 * cal.intrinsic[(1, 2)]);
    let (u, v) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
    let depth = rng.random_range(1.0..500.0);
    let cam = cal.intrinsic.try_inverse().unwrap() * Vec3::new(u * depth, v * depth, depth);
    cal.center + cal.extrinsic.transpose() * cam
}

/// Plain multi-head attention written with loops: rows of `q`, `k`, `v`
/// are tokens, weights are `[n_in, n_out]`.
pub struct RefAttention<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
    pub heads: usize,
    pub head_dim: usize,
}

fn project(x: &[f64], n: usize, d_in: usize, w: &[f64], d_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * d_out];
    for i in 0..n {
        for o in 0..d_out {
            out[i * d_out + o] = (0..d_in).map(|k| x[i * d_in + k] * w[k * d_out + o]).sum();
        }
    }
    out
}

impl RefAttention<'_> {
    /// Returns `(output [n_q, d_m], weights [heads, n_q, n_k])`.
    pub fn run(
        &self,
        q: &[f64],
        n_q: usize,
        d_m: usize,
        kv: &[f64],
        n_k: usize,
        d_e: usize,
        residual: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let inner = self.heads * self.head_dim;
        let qp = project(q, n_q, d_m, self.wq, inner);
        let kp = project(kv, n_k, d_e, self.wk, inner);
        let vp = project(kv, n_k, d_e, self.wv, inner);
        let mut concat = vec![0.0; n_q * inner];
        let mut weights = vec![0.0; self.heads * n_q * n_k];
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        for h in 0..self.heads {
            let off = h * self.head_dim;
            for i in 0..n_q {
                let logits: Vec<f64> = (0..n_k)
                    .map(|j| {
                        (0..self.head_dim)
                            .map(|d| qp[i * inner + off + d] * kp[j * inner + off + d])
                            .sum::<f64>()
                            * scale
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n_k {
                    let a = e[j] / z;
                    weights[(h * n_q + i) * n_k + j] = a;
                    for d in 0..self.head_dim {
                        concat[i * inner + off + d] += a * vp[j * inner + off + d];
                    }
                }
            }
        }
        let mut out = project(&concat, n_q, inner, self.wo, d_m);
        for i in 0..n_q {
            for o in 0..d_m {
                out[i * d_m + o] += self.bo[o] + residual[i * d_m + o];
            }
        }
        (out, weights)
    }
}

/// Binary cross-entropy of a logit: `-ln p = ln(1 + e^-z)` for a positive
/// label and `-ln(1 - p) = ln(1 + e^z)` otherwise.
pub fn bce(logit: f64, label: bool) -> f64 {
    let z = if label { -logit } else { logit };
    z.exp().ln_1p()
}

/// Per-class IoU from explicit cell sets.
pub fn set_iou(pred: &ClassMap, gt: &ClassMap, n_classes: usize) -> Vec<Option<f64>> {
    (0..n_classes as u8)
        .map(|k| {
            let p: HashSet<usize> = pred
                .classes
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == k)
                .map(|(i, _)| i)
                .collect();
            let g: HashSet<usize> = gt
                .classes
                .iter()
                .enumerate()
                .filter(|(_, &c)| c == k)
                .map(|(i, _)| i)
                .collect();
            let union = p.union(&g).count();
            (union > 0).then(|| p.intersection(&g).count() as f64 / union as f64)
        })
        .collect()
}

/// Centroid `(u, v)` of pixels where `mask` holds, in pixel-center
/// coordinates; `None` when empty.
pub fn centroid(w: usize, mask: impl Iterator<Item = bool>) -> Option<(f64, f64)> {
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
    for (p, on) in mask.enumerate() {
        if on {
            su += (p % w) as f64 + 0.5;
            sv += (p / w) as f64 + 0.5;
            n += 1;
        }
    }
    (n > 0).then(|| (su / n as f64, sv / n as f64))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// A model small enough for fast end-to-end tests.
pub fn micro_model() -> bevfuse::model::ModelConfig {
    bevfuse::model::ModelConfig {
        d_e: 8,
        d_m: 8,
        n_heads: 2,
        head_dim: 4,
        ffn_dim: 8,
        image_h: 16,
        image_w: 32,
        image_channels: vec![4, 4, 4, 4],
        pseudo_h: 16,
        pseudo_w: 16,
        unet_channels: vec![4, 4, 4, 4],
        map_h: 12,
        map_w: 12,
        meters_per_cell: 50.0,
        h_q: 3,
        w_q: 3,
        decoder_channels: [8, 4, 4],
        ..bevfuse::model::ModelConfig::toy()
    }
}

pub fn one_hot(map: &ClassMap) -> Tensor<f64> {
    let (h, w) = (map.h, map.w);
    let mut data = vec![0.0; NUM_CLASSES * h * w];
    for (p, &k) in map.classes.iter().enumerate() {
        data[k as usize * h * w + p] = 1.0;
    }
    Tensor::from_vec(data, &[NUM_CLASSES, h, w]).unwrap()
}

/// Mean IoU between the current ground truth of a static scene and the
/// earlier ground truth aligned into the current frame (or left as is when
/// `align` is false). Returns `(interior, whole map)`: the interior score
/// counts only cells whose 3x3 neighbourhood holds a single class, where
/// the sampled labels do not depend on the lattice offset between frames.
pub fn static_alignment_iou(seed: u64, align: bool) -> (f64, f64) {
    let spec = SceneSpec {
        seed,
        target_count: (0, 0),
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec).unwrap();
    let n = 100;
    let grid = BevGrid::centered(n, n, 6.0);
    let (then, now) = (scene.pose(0), scene.pose(spec.t - 1));
    let gt_then = scene.ground_truth(&grid, &then, scene.timestamps[0]);
    let gt_now = scene.ground_truth(&grid, &now, scene.now());
    let aligned = if align {
        predict_classes(&align_bev(&one_hot(&gt_then), &then, &now, &grid).unwrap()).unwrap()
    } else {
        gt_then
    };
    let valid = align_bev(&Tensor::full(&[1, n, n], 1.0), &then, &now, &grid)
        .unwrap()
        .to_vec();
    let inside: Vec<usize> = (0..n * n).filter(|&p| valid[p] > 1.0 - 1e-9).collect();
    let uniform = |p: usize| {
        let (r, c) = (p / n, p % n);
        r > 0 && c > 0 && r + 1 < n && c + 1 < n && {
            let k = gt_now.get(r, c);
            (r - 1..=r + 1).all(|i| (c - 1..=c + 1).all(|j| gt_now.get(i, j) == k))
        }
    };
    let interior: Vec<usize> = inside.iter().copied().filter(|&p| uniform(p)).collect();
    let score = |cells: &[usize]| {
        let pick = |m: &ClassMap| ClassMap {
            h: 1,
            w: cells.len(),
            classes: cells.iter().map(|&p| m.classes[p]).collect(),
        };
        iou_multiclass(&pick(&aligned), &pick(&gt_now), NUM_CLASSES)
            .unwrap()
            .mean
    };
    (score(&interior), score(&inside))
}
