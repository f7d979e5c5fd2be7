//! On-disk dataset layout: `dataset.json` at the root and one directory
//! per sample holding `manifest.json` plus `.ten` tensors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, CameraCalibration, Pose, RigidTransform};
use crate::head::{ClassMap, CLASS_NAMES};
use crate::raster::PointCloud;

use super::container::{TenFile, TenPayload};
use super::render::Image;
use super::sample::{CameraFrame, DatasetSample, InstantFrame, LidarFrame, SynthConfig};
use super::scene::Scene;

pub const DATASET_FILE: &str = "dataset.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub samples: Vec<String>,
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CameraEntry {
    cal: CameraCalibration,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LidarEntry {
    sensor_id: String,
    mount: RigidTransform,
    file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct InstantEntry {
    timestamp: f64,
    pose: Pose,
    cameras: Vec<CameraEntry>,
    lidars: Vec<LidarEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    sample_id: String,
    class_names: Vec<String>,
    grid: BevGrid,
    gt_file: String,
    instants: Vec<InstantEntry>,
    scene: Option<Scene>,
}

fn image_file(img: &Image) -> Result<TenFile> {
    TenFile::new(vec![img.h, img.w, img.c], TenPayload::U8(img.data.clone()))
}

fn read_image(path: &Path) -> Result<Image> {
    let f = TenFile::read(path)?;
    match (f.dims.as_slice(), f.payload) {
        (&[h, w, c], TenPayload::U8(data)) => Ok(Image { h, w, c, data }),
        (dims, _) => Err(Error::CorruptContainer(format!(
            "{}: expected a u8 [H, W, C] image, got dims {dims:?}",
            path.display()
        ))),
    }
}

fn read_cloud(path: &Path, sensor_id: &str, timestamp: f64) -> Result<PointCloud> {
    let f = TenFile::read(path)?;
    let ok_dims = matches!(f.dims.as_slice(), &[_, 3]);
    match f.payload {
        TenPayload::F64(v) if ok_dims => Ok(PointCloud::new(
            v.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect(),
            sensor_id,
            timestamp,
        )),
        _ => Err(Error::CorruptContainer(format!(
            "{}: expected an f64 [N, 3] cloud, got dims {:?}",
            path.display(),
            f.dims
        ))),
    }
}

pub fn write_sample(dir: &Path, sample: &DatasetSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut instants = Vec::with_capacity(sample.instants.len());
    for (tau, frame) in sample.instants.iter().enumerate() {
        let mut cameras = Vec::new();
        for cam in &frame.cameras {
            let file = format!("t{tau}_{}.ten", cam.cal.view_id);
            image_file(&cam.image)?.write(&dir.join(&file))?;
            cameras.push(CameraEntry {
                cal: cam.cal.clone(),
                file,
            });
        }
        let mut lidars = Vec::new();
        for lidar in &frame.lidars {
            let file = format!("t{tau}_{}.ten", lidar.cloud.sensor_id);
            let flat: Vec<f64> = lidar.cloud.points.iter().flatten().copied().collect();
            TenFile::new(vec![lidar.cloud.len(), 3], TenPayload::F64(flat))?.write(&dir.join(&file))?;
            lidars.push(LidarEntry {
                sensor_id: lidar.cloud.sensor_id.clone(),
                mount: lidar.mount,
                file,
            });
        }
        instants.push(InstantEntry {
            timestamp: frame.timestamp,
            pose: frame.pose.clone(),
            cameras,
            lidars,
        });
    }
    let gt_file = "gt.ten".to_string();
    TenFile::new(
        vec![sample.gt.h, sample.gt.w],
        TenPayload::U8(sample.gt.classes.clone()),
    )?
    .write(&dir.join(&gt_file))?;
    let manifest = Manifest {
        sample_id: sample.sample_id.clone(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        grid: sample.grid,
        gt_file,
        instants,
        scene: sample.scene.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_sample(dir: &Path) -> Result<DatasetSample> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(manifest_path));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.class_names != CLASS_NAMES {
        return Err(Error::Dataset(format!(
            "class names {:?} differ from {CLASS_NAMES:?}",
            manifest.class_names
        )));
    }
    let mut instants = Vec::with_capacity(manifest.instants.len());
    for entry in manifest.instants {
        let cameras = entry
            .cameras
            .into_iter()
            .map(|c| {
                Ok(CameraFrame {
                    image: read_image(&dir.join(&c.file))?,
                    cal: c.cal,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let lidars = entry
            .lidars
            .into_iter()
            .map(|l| {
                Ok(LidarFrame {
                    cloud: read_cloud(&dir.join(&l.file), &l.sensor_id, entry.timestamp)?,
                    mount: l.mount,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        instants.push(InstantFrame {
            timestamp: entry.timestamp,
            pose: entry.pose,
            cameras,
            lidars,
        });
    }
    let gt = TenFile::read(&dir.join(&manifest.gt_file))?;
    let gt = match (gt.dims.as_slice(), gt.payload) {
        (&[h, w], TenPayload::U8(classes)) if h == manifest.grid.cells_h && w == manifest.grid.cells_w => {
            ClassMap { h, w, classes }
        }
        (dims, _) => {
            return Err(Error::CorruptContainer(format!(
                "ground truth dims {dims:?} do not match the {}x{} grid",
                manifest.grid.cells_h, manifest.grid.cells_w
            )))
        }
    };
    Ok(DatasetSample {
        sample_id: manifest.sample_id,
        instants,
        gt,
        grid: manifest.grid,
        scene: manifest.scene,
    })
}

/// Writes `samples` under `root` with a `dataset.json` index.
pub fn write_dataset(root: &Path, samples: &[DatasetSample], synth: Option<&SynthConfig>) -> Result<()> {
    fs::create_dir_all(root)?;
    for s in samples {
        write_sample(&root.join(&s.sample_id), s)?;
    }
    let index = DatasetIndex {
        version: FORMAT_VERSION,
        samples: samples.iter().map(|s| s.sample_id.clone()).collect(),
        synth: synth.cloned(),
    };
    fs::write(root.join(DATASET_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    let path = root.join(DATASET_FILE);
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let index: DatasetIndex = serde_json::from_str(&fs::read_to_string(&path)?)?;
    if index.version != FORMAT_VERSION {
        return Err(Error::Dataset(format!("unsupported dataset version {}", index.version)));
    }
    Ok(index)
}

pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    Ok(read_index(root)?.samples.iter().map(|s| root.join(s)).collect())
}

pub fn read_dataset(root: &Path) -> Result<Vec<DatasetSample>> {
    sample_dirs(root)?.iter().map(|d| read_sample(d)).collect()
}
