//! Rendered dataset samples and their conversion to model inputs.

use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraCalibration, Modality, Pose, RigidTransform, Vec3};
use crate::head::ClassMap;
use crate::model::{InstantInput, ModelConfig, ModelInput, ViewInput};
use crate::raster::{pseudo_camera_calibration, rasterize, PointCloud, RasterConfig};
use crate::scalar::Scalar;

use super::render::{render_camera, scan_lidar, Image};
use super::rig::SensorRig;
use super::scene::{generate_scene, Scene, SceneSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct CameraFrame {
    /// Calibration as recorded, which may differ from the rendering one
    /// when miscalibration is simulated.
    pub cal: CameraCalibration,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LidarFrame {
    /// Sensor-to-body transform.
    pub mount: RigidTransform,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstantFrame {
    pub timestamp: f64,
    pub pose: Pose,
    pub cameras: Vec<CameraFrame>,
    pub lidars: Vec<LidarFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSample {
    pub sample_id: String,
    /// Oldest first.
    pub instants: Vec<InstantFrame>,
    /// Labels of the current instant in its body frame.
    pub gt: ClassMap,
    pub grid: BevGrid,
    pub scene: Option<Scene>,
}

impl DatasetSample {
    pub fn now(&self) -> &InstantFrame {
        self.instants.last().expect("sample has instants")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub scene: SceneSpec,
    pub rig: SensorRig,
    pub map_h: usize,
    pub map_w: usize,
    pub meters_per_cell: f64,
    /// Standard deviation of the recorded extrinsic error, degrees.
    pub miscalibration_deg: f64,
    /// Standard deviation of the recorded camera-center error, meters.
    pub miscalibration_m: f64,
}

impl SynthConfig {
    /// Rig, map and instant count matching `model`.
    pub fn for_model(model: &ModelConfig, n_samples: usize, seed: u64) -> Self {
        Self {
            seed,
            n_samples,
            scene: SceneSpec {
                extent_m: model.extent_m(),
                t: model.t,
                ..SceneSpec::default()
            },
            rig: SensorRig::standard(model.image_h, model.image_w),
            map_h: model.map_h,
            map_w: model.map_w,
            meters_per_cell: model.meters_per_cell,
            miscalibration_deg: 0.0,
            miscalibration_m: 0.0,
        }
    }

    pub fn grid(&self) -> BevGrid {
        BevGrid::centered(self.map_h, self.map_w, self.meters_per_cell)
    }
}

/// Per-sample seed derived from the dataset seed (splitmix64 finalizer).
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn perturb(cal: &CameraCalibration, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<CameraCalibration> {
    if cfg.miscalibration_deg <= 0.0 && cfg.miscalibration_m <= 0.0 {
        return Ok(cal.clone());
    }
    let ang = Normal::new(0.0, cfg.miscalibration_deg.max(0.0).to_radians()).expect("finite std");
    let pos = Normal::new(0.0, cfg.miscalibration_m.max(0.0)).expect("finite std");
    let axis_angle = Vec3::new(ang.sample(rng), ang.sample(rng), ang.sample(rng));
    let delta = Rotation3::new(axis_angle).into_inner();
    let shift = Vec3::new(pos.sample(rng), pos.sample(rng), pos.sample(rng));
    CameraCalibration::new(
        cal.view_id.clone(),
        cal.modality,
        cal.intrinsic,
        delta * cal.extrinsic,
        cal.center + shift,
    )
}

/// Renders sample `index` of the dataset described by `cfg`.
pub fn render_sample(cfg: &SynthConfig, index: usize) -> Result<DatasetSample> {
    let seed = sample_seed(cfg.seed, index);
    let spec = SceneSpec {
        seed,
        ..cfg.scene.clone()
    };
    let scene = generate_scene(&spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let true_cals = cfg
        .rig
        .cameras
        .iter()
        .map(|c| c.calibration())
        .collect::<Result<Vec<_>>>()?;
    let recorded = true_cals
        .iter()
        .map(|c| perturb(c, cfg, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut instants = Vec::with_capacity(scene.timestamps.len());
    for (i, &time) in scene.timestamps.iter().enumerate() {
        let pose = scene.pose(i);
        let cameras = true_cals
            .iter()
            .zip(&recorded)
            .map(|(cal, rec)| {
                let (image, _) = render_camera(&scene, time, &pose, cal)?;
                Ok(CameraFrame {
                    cal: rec.clone(),
                    image,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lidars = cfg
            .rig
            .lidars
            .iter()
            .map(|spec| LidarFrame {
                mount: spec.mount(),
                cloud: scan_lidar(&scene, time, &pose, spec, &mut rng),
            })
            .collect();
        instants.push(InstantFrame {
            timestamp: time,
            pose,
            cameras,
            lidars,
        });
    }
    let grid = cfg.grid();
    let gt = scene.ground_truth(&grid, &scene.pose(scene.timestamps.len() - 1), scene.now());
    Ok(DatasetSample {
        sample_id: format!("sample_{index:04}"),
        instants,
        gt,
        grid,
        scene: Some(scene),
    })
}

/// Renders every sample; the result does not depend on thread count.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<DatasetSample>> {
    (0..cfg.n_samples)
        .into_par_iter()
        .map(|i| render_sample(cfg, i))
        .collect()
}

/// Which modalities reach the network; disabled views are fed zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputOptions {
    pub rgb: bool,
    pub lwir: bool,
    pub lidar: bool,
}

impl Default for InputOptions {
    fn default() -> Self {
        Self {
            rgb: true,
            lwir: true,
            lidar: true,
        }
    }
}

/// `[C, H, W]` tensor with pixel values mapped to `[-0.5, 0.5]`.
pub fn image_tensor<T: Scalar>(img: &Image) -> Result<Tensor<T>> {
    let (h, w, c) = (img.h, img.w, img.c);
    let mut data = vec![T::zero(); c * h * w];
    for r in 0..h {
        for col in 0..w {
            let px = img.pixel(r, col);
            for ch in 0..c {
                data[(ch * h + r) * w + col] = T::from_f64_lossy(px[ch] as f64 / 255.0 - 0.5);
            }
        }
    }
    Tensor::from_vec(data, &[c, h, w])
}

/// Raster layout used for lidar pseudo-images of `model`.
pub fn pseudo_raster_config(model: &ModelConfig) -> RasterConfig {
    RasterConfig::centered(model.pseudo_h, model.pseudo_w, model.extent_m() / model.pseudo_h as f64)
}

/// Builds the network input of one sample; the last `model.t` instants
/// are used.
pub fn to_model_input<T: Scalar>(
    sample: &DatasetSample,
    model: &ModelConfig,
    opts: InputOptions,
) -> Result<ModelInput<T>> {
    let raster = pseudo_raster_config(model);
    let n = sample.instants.len();
    let first = n.saturating_sub(model.t);
    let mut instants = Vec::with_capacity(n - first);
    for frame in &sample.instants[first..] {
        let mut views = Vec::new();
        for cam in &frame.cameras {
            if cam.image.h != model.image_h || cam.image.w != model.image_w {
                return Err(Error::shape(
                    "to_model_input",
                    format!(
                        "view {} is {}x{}, model expects {}x{}",
                        cam.cal.view_id, cam.image.h, cam.image.w, model.image_h, model.image_w
                    ),
                ));
            }
            let enabled = match cam.cal.modality {
                Modality::Rgb => opts.rgb,
                Modality::Lwir => opts.lwir,
                Modality::LidarPseudo => opts.lidar,
            };
            let image = if enabled {
                image_tensor(&cam.image)?
            } else {
                Tensor::zeros(&[cam.image.c, cam.image.h, cam.image.w])
            };
            views.push(ViewInput {
                view_id: cam.cal.view_id.clone(),
                modality: cam.cal.modality,
                cal: cam.cal.clone(),
                image,
            });
        }
        for lidar in &frame.lidars {
            let image = if opts.lidar {
                rasterize(&lidar.cloud.transformed(&lidar.mount), &raster)?.to_tensor(model.z_scale)?
            } else {
                Tensor::zeros(&[crate::encoders::PSEUDO_CHANNELS, model.pseudo_h, model.pseudo_w])
            };
            views.push(ViewInput {
                view_id: lidar.cloud.sensor_id.clone(),
                modality: Modality::LidarPseudo,
                cal: pseudo_camera_calibration(&raster, model.extent_m() / 2.0, lidar.cloud.sensor_id.clone())?,
                image,
            });
        }
        instants.push(InstantInput {
            views,
            pose: frame.pose.clone(),
        });
    }
    Ok(ModelInput { instants })
}

/// Draws a random index permutation; helper for deterministic shuffling.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
