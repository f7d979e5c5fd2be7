//! Pinhole cameras, viewing rays, ego poses and the BEV grid.
//!
//! Frames: the own-ship body frame has `x` forward, `y` to starboard and
//! `z` up; the BEV plane is `z = 0`. Cameras use `x` right, `y` down, `z`
//! along the optical axis. Pixel coordinates `(u, v)` are continuous with
//! pixel `(col, row)` covering `[col, col+1) x [row, row+1)`, so its center
//! is `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Tolerance for orthonormality and determinant checks on rotations.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Rgb,
    Lwir,
    LidarPseudo,
}

pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let should_be_identity = m.transpose() * m;
    (should_be_identity - Mat3::identity()).abs().max() <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Rotation by `angle` radians about `+z`.
pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation by `angle` radians about `+x`.
pub fn rotation_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

/// World-to-camera rotation for a camera whose optical axis points at
/// heading `yaw` in the horizontal plane, tilted down by `pitch_down`.
pub fn camera_extrinsic(yaw: f64, pitch_down: f64) -> Mat3 {
    let forward = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let down = Vec3::new(0.0, 0.0, -1.0);
    let right = down.cross(&forward);
    let level = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    // Tilting the optical axis towards the camera's +y (down).
    rotation_x(pitch_down) * level
}

/// Pinhole intrinsic matrix.
pub fn intrinsic(fx: f64, fy: f64, cx: f64, cy: f64) -> Mat3 {
    Mat3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0)
}

/// Intrinsic, extrinsic and position of one (pseudo-)camera view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibrationRecord", into = "CalibrationRecord")]
pub struct CameraCalibration {
    pub view_id: String,
    pub modality: Modality,
    /// Pixels from camera-frame rays.
    pub intrinsic: Mat3,
    /// World-to-camera rotation.
    pub extrinsic: Mat3,
    /// Camera center in the world frame, meters.
    pub center: Vec3,
}

/// Row-major wire form of a calibration, as stored in dataset manifests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub view_id: String,
    pub modality: Modality,
    pub intrinsic: [f64; 9],
    pub extrinsic: [f64; 9],
    pub center: [f64; 3],
}

fn row_major(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m[(r, c)];
        }
    }
    out
}

impl From<CameraCalibration> for CalibrationRecord {
    fn from(c: CameraCalibration) -> Self {
        Self {
            view_id: c.view_id,
            modality: c.modality,
            intrinsic: row_major(&c.intrinsic),
            extrinsic: row_major(&c.extrinsic),
            center: [c.center.x, c.center.y, c.center.z],
        }
    }
}

impl TryFrom<CalibrationRecord> for CameraCalibration {
    type Error = Error;

    fn try_from(r: CalibrationRecord) -> Result<Self> {
        CameraCalibration::new(
            r.view_id,
            r.modality,
            Mat3::from_row_slice(&r.intrinsic),
            Mat3::from_row_slice(&r.extrinsic),
            Vec3::from(r.center),
        )
    }
}

/// Pixel position and depth along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl CameraCalibration {
    pub fn new(
        view_id: impl Into<String>,
        modality: Modality,
        intrinsic: Mat3,
        extrinsic: Mat3,
        center: Vec3,
    ) -> Result<Self> {
        if intrinsic.try_inverse().is_none() || intrinsic.determinant().abs() < 1e-300 {
            return Err(Error::SingularCalibration);
        }
        if !is_rotation(&extrinsic, ROTATION_TOL) {
            return Err(Error::SingularCalibration);
        }
        Ok(Self {
            view_id: view_id.into(),
            modality,
            intrinsic,
            extrinsic,
            center,
        })
    }

    fn intrinsic_inverse(&self) -> Result<Mat3> {
        self.intrinsic.try_inverse().ok_or(Error::SingularCalibration)
    }

    /// `x^I = (u_x/u_z, u_y/u_z, u_z)` with `u = I E (x^W - x^c)`.
    pub fn project(&self, world: &Vec3) -> Result<ImagePoint> {
        self.intrinsic_inverse()?;
        let u = self.intrinsic * self.extrinsic * (world - self.center);
        if u.z <= 0.0 {
            return Err(Error::BehindCamera(u.z));
        }
        Ok(ImagePoint {
            u: u.x / u.z,
            v: u.y / u.z,
            depth: u.z,
        })
    }

    /// Inverse of [`CameraCalibration::project`] for a known depth.
    pub fn back_project(&self, p: &ImagePoint) -> Result<Vec3> {
        let cam = self.intrinsic_inverse()? * Vec3::new(p.u * p.depth, p.v * p.depth, p.depth);
        Ok(self.center + self.extrinsic.transpose() * cam)
    }

    /// Unit world-frame direction of the ray through pixel `(u, v)`.
    pub fn pixel_to_ray(&self, u: f64, v: f64) -> Result<Vec3> {
        let d = self.extrinsic.transpose() * (self.intrinsic_inverse()? * Vec3::new(u, v, 1.0));
        Ok(d.normalize())
    }

    /// Calibration of the same camera after resampling its image by
    /// `factor` (e.g. `1/8` for a feature map at 8x downscale).
    pub fn scaled(&self, factor: f64) -> Self {
        let mut c = self.clone();
        for col in 0..3 {
            c.intrinsic[(0, col)] *= factor;
            c.intrinsic[(1, col)] *= factor;
        }
        c
    }

    /// Rays through the centers of an `h x w` pixel grid, row-major.
    pub fn grid_rays(&self, h: usize, w: usize) -> Result<Vec<Vec3>> {
        let k_inv = self.intrinsic_inverse()?;
        let e_t = self.extrinsic.transpose();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let p = Vec3::new(c as f64 + 0.5, r as f64 + 0.5, 1.0);
                out.push((e_t * (k_inv * p)).normalize());
            }
        }
        Ok(out)
    }
}

/// Free-function form of [`CameraCalibration::project`].
pub fn project_world_to_image(cal: &CameraCalibration, point: &Vec3) -> Result<ImagePoint> {
    cal.project(point)
}

/// Free-function form of [`CameraCalibration::pixel_to_ray`].
pub fn pixel_to_ray(cal: &CameraCalibration, u: f64, v: f64) -> Result<Vec3> {
    cal.pixel_to_ray(u, v)
}

/// Body-to-world rigid pose of the own ship at one instant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub timestamp: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub timestamp: f64,
}

impl From<Pose> for PoseRecord {
    fn from(p: Pose) -> Self {
        Self {
            rotation: row_major(&p.rotation),
            translation: [p.translation.x, p.translation.y, p.translation.z],
            timestamp: p.timestamp,
        }
    }
}

impl TryFrom<PoseRecord> for Pose {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        Pose::new(
            Mat3::from_row_slice(&r.rotation),
            Vec3::from(r.translation),
            r.timestamp,
        )
    }
}

/// Rotation and translation mapping points of one frame into another.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRecord", into = "TransformRecord")]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<RigidTransform> for TransformRecord {
    fn from(t: RigidTransform) -> Self {
        Self {
            rotation: row_major(&t.rotation),
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl TryFrom<TransformRecord> for RigidTransform {
    type Error = Error;

    fn try_from(r: TransformRecord) -> Result<Self> {
        let rotation = Mat3::from_row_slice(&r.rotation);
        if !is_rotation(&rotation, ROTATION_TOL) {
            return Err(Error::SingularCalibration);
        }
        Ok(Self {
            rotation,
            translation: Vec3::from(r.translation),
        })
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, inner: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
        }
    }

    /// Heading angle of the rotation about `z`.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// Closest planar motion: yaw about `z` plus the `x`, `y` translation.
    pub fn to_planar(&self) -> RigidTransform {
        RigidTransform {
            rotation: rotation_z(self.yaw()),
            translation: Vec3::new(self.translation.x, self.translation.y, 0.0),
        }
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3, timestamp: f64) -> Result<Self> {
        if !is_rotation(&rotation, ROTATION_TOL) {
            return Err(Error::SingularCalibration);
        }
        Ok(Self {
            rotation,
            translation,
            timestamp,
        })
    }

    pub fn planar(x: f64, y: f64, yaw: f64, timestamp: f64) -> Self {
        Self {
            rotation: rotation_z(yaw),
            translation: Vec3::new(x, y, 0.0),
            timestamp,
        }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    pub fn to_world(&self, body: &Vec3) -> Vec3 {
        self.rotation * body + self.translation
    }

    pub fn to_body(&self, world: &Vec3) -> Vec3 {
        self.rotation.transpose() * (world - self.translation)
    }
}

/// Transform `D` with `a ∘ D = b`, i.e. the motion from pose `a` to pose
/// `b` expressed in `a`'s body frame. `D` maps `b`-frame points into the
/// `a` frame.
pub fn pose_difference(a: &Pose, b: &Pose) -> RigidTransform {
    let rt = a.rotation.transpose();
    RigidTransform {
        rotation: rt * b.rotation,
        translation: rt * (b.translation - a.translation),
    }
}

/// Metric grid on the `z = 0` plane centered on the own ship.
///
/// Grid coordinates are continuous: cell `(r, c)` covers
/// `[r, r+1) x [c, c+1)`. Rows grow towards `-x`, columns towards `+y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    pub cells_h: usize,
    pub cells_w: usize,
    pub meters_per_cell: f64,
    /// Own-ship position in continuous grid coordinates `(row, col)`.
    pub center: (f64, f64),
}

impl BevGrid {
    pub fn centered(cells_h: usize, cells_w: usize, meters_per_cell: f64) -> Self {
        Self {
            cells_h,
            cells_w,
            meters_per_cell,
            center: (cells_h as f64 / 2.0, cells_w as f64 / 2.0),
        }
    }

    pub fn num_cells(&self) -> usize {
        self.cells_h * self.cells_w
    }

    pub fn extent(&self) -> (f64, f64) {
        (
            self.cells_h as f64 * self.meters_per_cell,
            self.cells_w as f64 * self.meters_per_cell,
        )
    }

    /// Continuous grid coordinates of a metric point.
    pub fn world_to_grid(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.center.0 - x / self.meters_per_cell,
            self.center.1 + y / self.meters_per_cell,
        )
    }

    pub fn grid_to_world(&self, row: f64, col: f64) -> (f64, f64) {
        (
            (self.center.0 - row) * self.meters_per_cell,
            (col - self.center.1) * self.meters_per_cell,
        )
    }

    /// Metric position of the cell's grid anchor `(row, col)`.
    pub fn cell_to_world(&self, row: usize, col: usize) -> Result<(f64, f64)> {
        self.check_cell(row, col)?;
        Ok(self.grid_to_world(row as f64, col as f64))
    }

    /// Metric position of the cell's center.
    pub fn cell_center_to_world(&self, row: usize, col: usize) -> Result<(f64, f64)> {
        self.check_cell(row, col)?;
        Ok(self.grid_to_world(row as f64 + 0.5, col as f64 + 0.5))
    }

    pub fn world_to_cell(&self, x: f64, y: f64) -> Result<(usize, usize)> {
        let (r, c) = self.world_to_grid(x, y);
        let (r, c) = (r.floor(), c.floor());
        if r < 0.0 || c < 0.0 || r >= self.cells_h as f64 || c >= self.cells_w as f64 {
            return Err(Error::OutOfMap(x, y));
        }
        Ok((r as usize, c as usize))
    }

    fn check_cell(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.cells_h {
            return Err(Error::IndexOutOfRange {
                what: "bev row",
                index: row,
                len: self.cells_h,
            });
        }
        if col >= self.cells_w {
            return Err(Error::IndexOutOfRange {
                what: "bev column",
                index: col,
                len: self.cells_w,
            });
        }
        Ok(())
    }
}

pub fn bev_cell_to_world(grid: &BevGrid, row: usize, col: usize) -> Result<(f64, f64)> {
    grid.cell_to_world(row, col)
}

pub fn world_to_bev_cell(grid: &BevGrid, x: f64, y: f64) -> Result<(usize, usize)> {
    grid.world_to_cell(x, y)
}

/// World-to-camera rotation of a camera hovering over the map and looking
/// straight down: image `x` along `+y`, image `y` along `+x`.
pub fn overhead_extrinsic() -> Mat3 {
    Mat3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, -1.0)
}

/// Layout of the learnable map queries and the overhead pseudo-camera
/// that assigns each query a viewing direction.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryGrid {
    pub h_q: usize,
    pub w_q: usize,
    pub pseudo_intrinsic: Mat3,
    pub pseudo_extrinsic: Mat3,
    pub pseudo_center: Vec3,
}

impl QueryGrid {
    pub fn new(h_q: usize, w_q: usize) -> Self {
        Self {
            h_q,
            w_q,
            pseudo_intrinsic: Mat3::identity(),
            pseudo_extrinsic: overhead_extrinsic(),
            pseudo_center: Vec3::new(0.0, 0.0, 1.0),
        }
    }

    pub fn n_bev(&self) -> usize {
        self.h_q * self.w_q
    }

    /// Normalized image coordinates `(b_x, b_y)` of query cell `(r, c)`:
    /// `b_x` runs from west to east, `b_y` from south to north, both in
    /// `(-1, 1)`. Row 0 is the map's `+x` edge.
    pub fn normalized_coords(&self, r: usize, c: usize) -> (f64, f64) {
        (
            2.0 * (c as f64 + 0.5) / self.w_q as f64 - 1.0,
            1.0 - 2.0 * (r as f64 + 0.5) / self.h_q as f64,
        )
    }
}

impl Default for QueryGrid {
    fn default() -> Self {
        Self::new(25, 25)
    }
}

/// Unit directions `E_q^-1 I_q^-1 [b_x, b_y, 1]` for every query cell,
/// row-major.
pub fn bev_query_directions(qg: &QueryGrid) -> Result<Vec<Vec3>> {
    let k_inv = qg.pseudo_intrinsic.try_inverse().ok_or(Error::SingularCalibration)?;
    let e_inv = qg.pseudo_extrinsic.try_inverse().ok_or(Error::SingularCalibration)?;
    let mut out = Vec::with_capacity(qg.n_bev());
    for r in 0..qg.h_q {
        for c in 0..qg.w_q {
            let (bx, by) = qg.normalized_coords(r, c);
            out.push((e_inv * (k_inv * Vec3::new(bx, by, 1.0))).normalize());
        }
    }
    Ok(out)
}
