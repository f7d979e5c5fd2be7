//! Sensor rig: camera and lidar placement on the own ship.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{camera_extrinsic, intrinsic, rotation_z, CameraCalibration, Modality, RigidTransform, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub view_id: String,
    pub modality: Modality,
    /// Heading of the optical axis in the body frame, radians.
    pub yaw: f64,
    pub pitch_down: f64,
    pub hfov_deg: f64,
    pub vfov_deg: f64,
    pub position: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    /// Calibration in the own-ship body frame at the spec's resolution.
    pub fn calibration(&self) -> Result<CameraCalibration> {
        let fx = self.width as f64 / 2.0 / (self.hfov_deg.to_radians() / 2.0).tan();
        let fy = self.height as f64 / 2.0 / (self.vfov_deg.to_radians() / 2.0).tan();
        CameraCalibration::new(
            self.view_id.clone(),
            self.modality,
            intrinsic(fx, fy, self.width as f64 / 2.0, self.height as f64 / 2.0),
            camera_extrinsic(self.yaw, self.pitch_down),
            Vec3::from(self.position),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    pub sensor_id: String,
    pub position: [f64; 3],
    pub yaw: f64,
    pub hfov_deg: f64,
    /// Lowest and highest beam elevation, degrees.
    pub elevation_deg: (f64, f64),
    pub channels: usize,
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    /// Standard deviation of the Gaussian range noise, meters.
    pub range_noise: f64,
}

impl LidarSpec {
    /// Sensor-to-body transform.
    pub fn mount(&self) -> RigidTransform {
        RigidTransform {
            rotation: rotation_z(self.yaw),
            translation: Vec3::from(self.position),
        }
    }

    /// Unit beam directions in the sensor frame.
    pub fn beams(&self) -> Vec<Vec3> {
        let n_az = (self.hfov_deg / self.azimuth_step_deg).round().max(1.0) as usize;
        let mut out = Vec::with_capacity(n_az * self.channels);
        for ch in 0..self.channels {
            let (lo, hi) = self.elevation_deg;
            let el = if self.channels == 1 {
                lo
            } else {
                lo + (hi - lo) * ch as f64 / (self.channels - 1) as f64
            }
            .to_radians();
            for k in 0..n_az {
                let az = (-self.hfov_deg / 2.0 + (k as f64 + 0.5) * self.azimuth_step_deg).to_radians();
                out.push(Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    pub cameras: Vec<CameraSpec>,
    pub lidars: Vec<LidarSpec>,
}

impl SensorRig {
    /// Four RGB cameras covering all sides, two forward LWIR cameras and
    /// lidars at the bow and stern.
    pub fn standard(height: usize, width: usize) -> Self {
        Self::with_counts(4, 2, 2, height, width)
    }

    pub fn with_counts(n_rgb: usize, n_lwir: usize, n_lidar: usize, height: usize, width: usize) -> Self {
        let mut cameras = Vec::new();
        for i in 0..n_rgb {
            let yaw = std::f64::consts::TAU * i as f64 / n_rgb as f64;
            let (s, c) = yaw.sin_cos();
            cameras.push(CameraSpec {
                view_id: format!("rgb{i}"),
                modality: Modality::Rgb,
                yaw,
                pitch_down: 6f64.to_radians(),
                hfov_deg: 94.0,
                vfov_deg: 52.0,
                position: [2.0 * c, 2.0 * s, 12.0],
                width,
                height,
            });
        }
        for i in 0..n_lwir {
            let yaw = if n_lwir == 1 {
                0.0
            } else {
                (-30.0 + 60.0 * i as f64 / (n_lwir - 1) as f64).to_radians()
            };
            cameras.push(CameraSpec {
                view_id: format!("lwir{i}"),
                modality: Modality::Lwir,
                yaw,
                pitch_down: 4f64.to_radians(),
                hfov_deg: 50.0,
                vfov_deg: 40.0,
                position: [3.0, 0.0, 11.0],
                width,
                height,
            });
        }
        let lidars = (0..n_lidar)
            .map(|i| {
                let rear = i % 2 == 1;
                LidarSpec {
                    sensor_id: format!("lidar{i}"),
                    position: [if rear { -10.0 } else { 10.0 }, 0.0, 4.0],
                    yaw: if rear { std::f64::consts::PI } else { 0.0 },
                    hfov_deg: if n_lidar == 1 { 360.0 } else { 200.0 },
                    elevation_deg: (-10.0, 10.0),
                    channels: 16,
                    azimuth_step_deg: 0.5,
                    max_range: 200.0,
                    range_noise: 0.05,
                }
            })
            .collect();
        Self { cameras, lidars }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_rig_layout() {
        let rig = SensorRig::standard(48, 96);
        assert_eq!(rig.cameras.len(), 6);
        assert_eq!(rig.lidars.len(), 2);
        let cal = rig.cameras[1].calibration().unwrap();
        let axis = cal.extrinsic.transpose() * Vec3::z();
        assert!(axis.y > 0.99 && axis.z < 0.0);
    }

    #[test]
    fn beams_are_unit() {
        let rig = SensorRig::standard(48, 96);
        let beams = rig.lidars[0].beams();
        assert_eq!(beams.len(), 16 * 400);
        assert!(beams.iter().all(|b| (b.norm() - 1.0).abs() < 1e-12));
    }
}
