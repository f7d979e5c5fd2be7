//! Flat-shaded ray casting of scenes into camera images and lidar scans.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::geometry::{CameraCalibration, Modality, Pose, Vec3};
use crate::head::Class;
use crate::raster::PointCloud;

use super::rig::LidarSpec;
use super::scene::{Scene, LAND_ID, SHORELINE_ID};

/// Height of the visible shoreline rim above the water.
pub const SHORELINE_RIM_HEIGHT: f64 = 1.5;

pub const SKY_RGB: [u8; 3] = [170, 200, 230];
pub const SKY_LWIR: u8 = 10;

pub fn class_rgb(class: Class) -> [u8; 3] {
    match class {
        Class::Water => [30, 60, 120],
        Class::Land => [60, 140, 60],
        Class::Shoreline => [200, 190, 120],
        Class::Buoy => [240, 130, 20],
        Class::Target => [220, 40, 40],
    }
}

pub fn class_lwir(class: Class) -> u8 {
    match class {
        Class::Water => 40,
        Class::Land => 110,
        Class::Shoreline => 85,
        Class::Buoy => 170,
        Class::Target => 240,
    }
}

/// Interleaved 8-bit image, `h x w x c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0; h * w * c],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[u8] {
        let i = (row * self.w + col) * self.c;
        &self.data[i..i + self.c]
    }
}

/// Vertical elliptic prism standing on the water plane.
#[derive(Clone, Copy, Debug)]
struct Prism {
    center: [f64; 2],
    semi_axes: (f64, f64),
    heading: f64,
    height: f64,
    class: Class,
    instance: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub class: Class,
    /// 0 for water.
    pub instance: u32,
}

const EPS: f64 = 1e-9;

impl Prism {
    fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let (s, c) = self.heading.sin_cos();
        let (a, b) = self.semi_axes;
        let local = |x: f64, y: f64| ((c * x + s * y) / a, (-s * x + c * y) / b);
        let (ox, oy) = local(o.x - self.center[0], o.y - self.center[1]);
        let (dx, dy) = local(d.x, d.y);
        let mut best = f64::INFINITY;
        let qa = dx * dx + dy * dy;
        if qa > 0.0 {
            let qb = 2.0 * (ox * dx + oy * dy);
            let qc = ox * ox + oy * oy - 1.0;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)] {
                    let z = o.z + t * d.z;
                    if t > EPS && (0.0..=self.height).contains(&z) {
                        best = best.min(t);
                        break;
                    }
                }
            }
        }
        if d.z != 0.0 {
            let t = (self.height - o.z) / d.z;
            let (px, py) = (ox + t * dx, oy + t * dy);
            if t > EPS && px * px + py * py <= 1.0 {
                best = best.min(t);
            }
        }
        best.is_finite().then_some(best)
    }
}

fn prisms(scene: &Scene, time: f64) -> Vec<Prism> {
    let mut out = Vec::new();
    let rim = scene.spec.shoreline_width / 2.0;
    for blob in &scene.land {
        for d in &blob.discs {
            out.push(Prism {
                center: d.center,
                semi_axes: (d.radius, d.radius),
                heading: 0.0,
                height: blob.height,
                class: Class::Land,
                instance: LAND_ID,
            });
            out.push(Prism {
                center: d.center,
                semi_axes: (d.radius + rim, d.radius + rim),
                heading: 0.0,
                height: SHORELINE_RIM_HEIGHT,
                class: Class::Shoreline,
                instance: SHORELINE_ID,
            });
        }
    }
    for b in &scene.buoys {
        out.push(Prism {
            center: b.center,
            semi_axes: (b.radius, b.radius),
            heading: 0.0,
            height: b.height,
            class: Class::Buoy,
            instance: b.id,
        });
    }
    for t in &scene.targets {
        out.push(Prism {
            center: t.position(time),
            semi_axes: (t.length / 2.0, t.beam / 2.0),
            heading: t.heading(),
            height: t.height,
            class: Class::Target,
            instance: t.id,
        });
    }
    out
}

fn cast(prisms: &[Prism], o: &Vec3, d: &Vec3, max_t: f64, water: bool) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for p in prisms {
        if let Some(t) = p.intersect(o, d) {
            if t <= max_t && best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    class: p.class,
                    instance: p.instance,
                });
            }
        }
    }
    if water && d.z < 0.0 {
        let t = -o.z / d.z;
        if t > EPS && t <= max_t && best.is_none_or(|b| t < b.t) {
            best = Some(Hit {
                t,
                class: Class::Water,
                instance: 0,
            });
        }
    }
    best
}

/// First surface hit by a world-frame ray at `time`.
pub fn cast_ray(scene: &Scene, time: f64, origin: &Vec3, dir: &Vec3, max_t: f64, water: bool) -> Option<Hit> {
    cast(&prisms(scene, time), origin, dir, max_t, water)
}

/// Renders one camera. `cal` is the body-frame calibration; the returned
/// instance buffer holds the hit instance per pixel (0 for water, and
/// `u32::MAX` for sky).
pub fn render_camera(scene: &Scene, time: f64, pose: &Pose, cal: &CameraCalibration) -> Result<(Image, Vec<u32>)> {
    let w = (2.0 * cal.intrinsic[(0, 2)]).round() as usize;
    let h = (2.0 * cal.intrinsic[(1, 2)]).round() as usize;
    render_camera_sized(scene, time, pose, cal, h, w)
}

pub fn render_camera_sized(
    scene: &Scene,
    time: f64,
    pose: &Pose,
    cal: &CameraCalibration,
    h: usize,
    w: usize,
) -> Result<(Image, Vec<u32>)> {
    let ps = prisms(scene, time);
    let origin = pose.to_world(&cal.center);
    let channels = if cal.modality == Modality::Lwir { 1 } else { 3 };
    let mut img = Image::new(h, w, channels);
    let mut ids = vec![u32::MAX; h * w];
    let rays = cal.grid_rays(h, w)?;
    for (p, ray) in rays.iter().enumerate() {
        let d = pose.rotation * ray;
        let hit = cast(&ps, &origin, &d, f64::INFINITY, true);
        let px = &mut img.data[p * channels..(p + 1) * channels];
        match hit {
            Some(hit) => {
                ids[p] = hit.instance;
                if channels == 1 {
                    px[0] = class_lwir(hit.class);
                } else {
                    px.copy_from_slice(&class_rgb(hit.class));
                }
            }
            None => {
                if channels == 1 {
                    px[0] = SKY_LWIR;
                } else {
                    px.copy_from_slice(&SKY_RGB);
                }
            }
        }
    }
    Ok((img, ids))
}

/// Simulates one lidar sweep; points are returned in the sensor frame.
/// Water gives no returns.
pub fn scan_lidar(scene: &Scene, time: f64, pose: &Pose, spec: &LidarSpec, rng: &mut impl Rng) -> PointCloud {
    let ps = prisms(scene, time);
    let mount = spec.mount();
    let origin = pose.to_world(&mount.translation);
    let noise = Normal::new(0.0, spec.range_noise.max(0.0)).expect("finite noise");
    let mut points = Vec::new();
    for beam in spec.beams() {
        let d = pose.rotation * (mount.rotation * beam);
        if let Some(hit) = cast(&ps, &origin, &d, spec.max_range, false) {
            let range = hit.t + noise.sample(rng);
            let p = beam * range;
            points.push([p.x, p.y, p.z]);
        }
    }
    PointCloud::new(points, spec.sensor_id.clone(), time)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneSpec, Target, FIRST_OBJECT_ID};

    #[test]
    fn prism_side_and_cap_hits() {
        let p = Prism {
            center: [10.0, 0.0],
            semi_axes: (2.0, 2.0),
            heading: 0.0,
            height: 5.0,
            class: Class::Buoy,
            instance: 7,
        };
        let t = p.intersect(&Vec3::new(0.0, 0.0, 1.0), &Vec3::x()).unwrap();
        assert!((t - 8.0).abs() < 1e-12);
        let t = p.intersect(&Vec3::new(10.0, 0.0, 9.0), &-Vec3::z()).unwrap();
        assert!((t - 4.0).abs() < 1e-12);
        assert!(p.intersect(&Vec3::new(0.0, 0.0, 6.0), &Vec3::x()).is_none());
    }

    #[test]
    fn target_dead_ahead_is_visible() {
        let mut scene = generate_scene(&SceneSpec::empty(1)).unwrap();
        scene.trajectory.heading_now = 0.0;
        scene.targets.push(Target {
            id: FIRST_OBJECT_ID,
            start: [50.0, 0.0],
            velocity: [0.0, 0.0],
            length: 20.0,
            beam: 8.0,
            height: 6.0,
        });
        let rig = crate::data::rig::SensorRig::standard(48, 96);
        let cal = rig.cameras[0].calibration().unwrap();
        let (img, ids) = render_camera(&scene, scene.now(), &scene.pose(2), &cal).unwrap();
        let red = (0..img.h * img.w)
            .filter(|&p| img.data[p * 3..p * 3 + 3] == class_rgb(Class::Target))
            .count();
        assert!(red > 0);
        assert_eq!(ids.iter().filter(|&&i| i == FIRST_OBJECT_ID).count(), red);
    }

    #[test]
    fn empty_scene_has_no_returns_and_only_water_or_sky() {
        let scene = generate_scene(&SceneSpec::empty(2)).unwrap();
        let rig = crate::data::rig::SensorRig::standard(24, 48);
        let mut rng = rand::rng();
        let pcd = scan_lidar(&scene, scene.now(), &scene.pose(2), &rig.lidars[0], &mut rng);
        assert!(pcd.is_empty());
        let (img, _) = render_camera(
            &scene,
            scene.now(),
            &scene.pose(2),
            &rig.cameras[0].calibration().unwrap(),
        )
        .unwrap();
        for p in img.data.chunks(3) {
            assert!(p == class_rgb(Class::Water) || p == SKY_RGB);
        }
    }
}
