//! Train-time augmentation with matching calibration updates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_z, CameraCalibration, Mat3, Vec3};

use super::render::Image;
use super::sample::{sample_seed, DatasetSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Smallest crop side as a fraction of the image; 1 disables cropping.
    pub min_crop: f64,
    /// In-plane rotation drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Additive brightness offset range, in pixel levels.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
    /// Probability of blacking out each view.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            min_crop: 1.0,
            rotation_deg: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.dropout)
            && self.min_crop > 0.0
            && self.min_crop <= 1.0
            && self.rotation_deg >= 0.0
            && self.brightness >= 0.0
            && (0.0..1.0).contains(&self.contrast);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation config {self:?}")))
        }
    }

    fn is_identity(&self) -> bool {
        self.min_crop == 1.0
            && self.rotation_deg == 0.0
            && self.brightness == 0.0
            && self.contrast == 0.0
            && self.dropout == 0.0
    }
}

/// Crop window `(scale, dx, dy)` plus in-plane rotation `theta`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewWarp {
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
    pub theta: f64,
}

impl ViewWarp {
    /// Pixel transform of the crop: old pixel coordinates to new ones.
    pub fn crop_matrix(&self) -> Mat3 {
        let s = self.scale;
        Mat3::new(1.0 / s, 0.0, -self.dx / s, 0.0, 1.0 / s, -self.dy / s, 0.0, 0.0, 1.0)
    }

    /// Updated calibration: `K' = S K`, `E' = Rz(theta) E`.
    pub fn apply_to_calibration(&self, cal: &CameraCalibration) -> Result<CameraCalibration> {
        CameraCalibration::new(
            cal.view_id.clone(),
            cal.modality,
            self.crop_matrix() * cal.intrinsic,
            rotation_z(self.theta) * cal.extrinsic,
            cal.center,
        )
    }

    /// Warps `img` so that it agrees with the updated calibration; nearest
    /// sampling, zeros outside the source.
    pub fn apply_to_image(&self, img: &Image, cal: &CameraCalibration) -> Result<Image> {
        let new_cal = self.apply_to_calibration(cal)?;
        let k_inv = new_cal.intrinsic.try_inverse().ok_or(Error::SingularCalibration)?;
        // Source pixel = K R^T K'^-1 p'.
        let back = cal.intrinsic * rotation_z(self.theta).transpose() * k_inv;
        let mut out = Image::new(img.h, img.w, img.c);
        for r in 0..img.h {
            for c in 0..img.w {
                let p = back * Vec3::new(c as f64 + 0.5, r as f64 + 0.5, 1.0);
                if p.z <= 0.0 {
                    continue;
                }
                let (u, v) = ((p.x / p.z).floor(), (p.y / p.z).floor());
                if u >= 0.0 && v >= 0.0 && (u as usize) < img.w && (v as usize) < img.h {
                    let src = img.pixel(v as usize, u as usize);
                    let i = (r * img.w + c) * img.c;
                    out.data[i..i + img.c].copy_from_slice(src);
                }
            }
        }
        Ok(out)
    }
}

fn jitter(img: &mut Image, brightness: f64, contrast: f64) {
    for p in &mut img.data {
        let v = (*p as f64 - 128.0) * contrast + 128.0 + brightness;
        *p = v.round().clamp(0.0, 255.0) as u8;
    }
}

fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xCBF2_9CE4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Augments a sample. The draw depends on `cfg.seed`, the sample id and
/// `nonce` (typically the epoch), and is shared by all instants of a view.
/// Ground truth is never touched.
pub fn augment(sample: &DatasetSample, cfg: &AugmentConfig, nonce: u64) -> Result<DatasetSample> {
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(sample.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed ^ stable_hash(&sample.sample_id), nonce as usize));
    let mut out = sample.clone();
    let n_cams = sample.instants.first().map_or(0, |f| f.cameras.len());
    for v in 0..n_cams {
        let scale = if cfg.min_crop < 1.0 {
            rng.random_range(cfg.min_crop..=1.0)
        } else {
            1.0
        };
        let (fx, fy) = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        let theta = if cfg.rotation_deg > 0.0 {
            rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg).to_radians()
        } else {
            0.0
        };
        let brightness = if cfg.brightness > 0.0 {
            rng.random_range(-cfg.brightness..=cfg.brightness)
        } else {
            0.0
        };
        let contrast = if cfg.contrast > 0.0 {
            rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
        } else {
            1.0
        };
        let drop = rng.random_bool(cfg.dropout);
        for frame in &mut out.instants {
            let cam = &mut frame.cameras[v];
            let warp = ViewWarp {
                scale,
                dx: fx * (1.0 - scale) * cam.image.w as f64,
                dy: fy * (1.0 - scale) * cam.image.h as f64,
                theta,
            };
            if scale != 1.0 || theta != 0.0 {
                cam.image = warp.apply_to_image(&cam.image, &cam.cal)?;
                cam.cal = warp.apply_to_calibration(&cam.cal)?;
            }
            if brightness != 0.0 || contrast != 1.0 {
                jitter(&mut cam.image, brightness, contrast);
            }
            if drop {
                cam.image.data.fill(0);
            }
        }
    }
    let n_lidars = sample.instants.first().map_or(0, |f| f.lidars.len());
    for l in 0..n_lidars {
        if rng.random_bool(cfg.dropout) {
            for frame in &mut out.instants {
                frame.lidars[l].cloud.points.clear();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::rig::SensorRig;
    use crate::data::sample::{render_sample, SynthConfig};
    use crate::model::ModelConfig;

    fn sample() -> DatasetSample {
        let mut cfg = SynthConfig::for_model(&ModelConfig::toy(), 1, 3);
        cfg.rig = SensorRig::with_counts(2, 1, 1, 12, 24);
        render_sample(&cfg, 0).unwrap()
    }

    #[test]
    fn zero_config_is_identity() {
        let s = sample();
        assert_eq!(augment(&s, &AugmentConfig::none(), 4).unwrap(), s);
    }

    #[test]
    fn full_dropout_blacks_out_everything() {
        let s = sample();
        let cfg = AugmentConfig {
            dropout: 1.0,
            ..AugmentConfig::none()
        };
        let a = augment(&s, &cfg, 0).unwrap();
        for f in &a.instants {
            assert!(f.cameras.iter().all(|c| c.image.data.iter().all(|&p| p == 0)));
            assert!(f.lidars.iter().all(|l| l.cloud.is_empty()));
        }
        assert_eq!(a.gt, s.gt);
    }

    #[test]
    fn pure_offset_shifts_projection() {
        let s = sample();
        let cal = &s.instants[0].cameras[0].cal;
        let warp = ViewWarp {
            scale: 1.0,
            dx: 3.0,
            dy: -2.0,
            theta: 0.0,
        };
        let new = warp.apply_to_calibration(cal).unwrap();
        let pt = Vec3::new(80.0, 5.0, 0.0);
        let a = cal.project(&pt).unwrap();
        let b = new.project(&pt).unwrap();
        assert!((b.u - (a.u - 3.0)).abs() < 1e-9 && (b.v - (a.v + 2.0)).abs() < 1e-9);
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = AugmentConfig {
            dropout: 1.5,
            ..AugmentConfig::none()
        };
        assert!(augment(&sample(), &cfg, 0).is_err());
    }
}
