//! Ego-motion alignment of past BEV feature maps and temporal fusion.

use std::sync::Arc;

use crate::diff::{ResamplePlan, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{pose_difference, BevGrid, Pose, Vec3};
use crate::nn::Init;
use crate::scalar::Scalar;

/// Resampling plan that expresses a map observed at `pose_then` in the
/// body frame of `pose_now`. Only yaw and planar translation are used.
pub fn alignment_plan(grid: &BevGrid, pose_then: &Pose, pose_now: &Pose) -> ResamplePlan {
    // Maps points of the current body frame into the earlier one.
    let now_to_then = pose_difference(pose_then, pose_now).to_planar();
    let (h, w) = (grid.cells_h, grid.cells_w);
    ResamplePlan::from_points(h, w, h, w, |r, c| {
        let (x, y) = grid.grid_to_world(r as f64 + 0.5, c as f64 + 0.5);
        let p = now_to_then.apply(&Vec3::new(x, y, 0.0));
        let (gr, gc) = grid.world_to_grid(p.x, p.y);
        (gr - 0.5, gc - 0.5)
    })
}

/// Aligns a `[C, h, w]` map from `pose_then` into `pose_now`'s frame;
/// `grid` describes the map's metric layout. Samples falling outside the
/// map read zero.
pub fn align_bev<T: Scalar>(map: &Tensor<T>, pose_then: &Pose, pose_now: &Pose, grid: &BevGrid) -> Result<Tensor<T>> {
    map.resample(&Arc::new(alignment_plan(grid, pose_then, pose_now)))
}

/// Valid 3-D convolution collapsing the time axis of an aligned stack.
#[derive(Clone, Debug)]
pub struct TemporalFusion<T: Scalar> {
    /// `[d_m, d_m, t, k, k]`.
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub t: usize,
    pub spatial: usize,
}

impl<T: Scalar> TemporalFusion<T> {
    /// The kernel starts as identity on the most recent instant plus
    /// small noise, so an untrained block passes current features through.
    pub fn new(init: &mut Init<'_, T>, name: &str, d_m: usize, t: usize, spatial: usize) -> Self {
        let shape = [d_m, d_m, t, spatial, spatial];
        let noise = init.normal(&format!("{name}.weight"), &shape, 0.02);
        let mut data = noise.to_vec();
        let centre = spatial / 2;
        for c in 0..d_m {
            let idx = (((c * d_m + c) * t + (t - 1)) * spatial + centre) * spatial + centre;
            data[idx] += T::one();
        }
        noise.set_data(data).expect("same length");
        Self {
            kernel: noise,
            bias: init.constant(&format!("{name}.bias"), &[d_m], 0.0),
            t,
            spatial,
        }
    }

    /// Fuses `t` aligned `[d_m, h, w]` maps (oldest first) into one
    /// `[d_m, h', w']` map.
    pub fn forward(&self, maps: &[Tensor<T>]) -> Result<Tensor<T>> {
        if maps.len() != self.t {
            return Err(Error::shape(
                "temporal_fuse",
                format!("stack depth {} but kernel spans {}", maps.len(), self.t),
            ));
        }
        let stack = Tensor::stack(maps)?.permute(&[1, 0, 2, 3])?;
        let out = stack.conv3d(&self.kernel, Some(&self.bias))?;
        let [c, _, h, w] = *out.shape() else { unreachable!() };
        out.reshape(&[c, h, w])
    }
}
