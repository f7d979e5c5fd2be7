//! Procedural marine scenes: land masses with shoreline bands, buoys,
//! moving targets and the own-ship trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BevGrid, Pose, Vec3};
use crate::head::{Class, ClassMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Side length of the mapped square around the own ship, meters.
    pub extent_m: f64,
    /// Inclusive ranges.
    pub land_blobs: (usize, usize),
    pub discs_per_blob: (usize, usize),
    pub land_radius: (f64, f64),
    pub land_height: (f64, f64),
    pub shoreline_width: f64,
    pub buoy_count: (usize, usize),
    pub buoy_radius: f64,
    pub buoy_height: f64,
    pub target_count: (usize, usize),
    /// Hull length and beam, meters.
    pub target_size: (f64, f64),
    pub target_height: f64,
    pub target_speed: (f64, f64),
    pub own_speed: (f64, f64),
    pub own_yaw_rate: (f64, f64),
    pub t: usize,
    pub dt: f64,
    /// Minimum distance between any object and the own-ship track.
    pub clearance: f64,
}

impl Default for SceneSpec {
    /// Objects are oversized relative to real ones so that they cover
    /// several cells of a 100x100 map over 600 m.
    fn default() -> Self {
        Self {
            seed: 0,
            extent_m: 600.0,
            land_blobs: (1, 3),
            discs_per_blob: (2, 4),
            land_radius: (30.0, 70.0),
            land_height: (8.0, 20.0),
            shoreline_width: 18.0,
            buoy_count: (2, 5),
            buoy_radius: 9.0,
            buoy_height: 6.0,
            target_count: (1, 3),
            target_size: (50.0, 24.0),
            target_height: 8.0,
            target_speed: (2.0, 6.0),
            own_speed: (3.0, 6.0),
            own_yaw_rate: (-0.01, 0.01),
            t: 3,
            dt: 5.0,
            clearance: 35.0,
        }
    }
}

impl SceneSpec {
    /// A spec with no land, buoys or targets.
    pub fn empty(seed: u64) -> Self {
        Self {
            seed,
            land_blobs: (0, 0),
            buoy_count: (0, 0),
            target_count: (0, 0),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if !(self.extent_m > 0.0) || self.t == 0 || !(self.dt >= 0.0) {
            return bad("extent, t and dt must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("land_blobs", self.land_blobs),
            ("discs_per_blob", self.discs_per_blob),
            ("buoy_count", self.buoy_count),
            ("target_count", self.target_count),
        ] {
            if lo > hi {
                return bad(format!("{name} range {lo}..={hi} is empty"));
            }
        }
        for (name, (lo, hi)) in [
            ("land_radius", self.land_radius),
            ("land_height", self.land_height),
            ("target_speed", self.target_speed),
            ("own_speed", self.own_speed),
            ("own_yaw_rate", self.own_yaw_rate),
        ] {
            if !(lo <= hi) {
                return bad(format!("{name} range {lo}..={hi} is empty"));
            }
        }
        if self.land_blobs.1 > 0 && self.discs_per_blob.0 == 0 {
            return bad("land blobs need at least one disc".into());
        }
        let half = self.extent_m / 2.0;
        let min_land = self.land_blobs.0 as f64 * std::f64::consts::PI * self.land_radius.0.powi(2);
        if min_land > 0.5 * self.extent_m * self.extent_m {
            return bad("requested land exceeds half the mapped area".into());
        }
        if self.land_radius.0 > half || self.clearance > half {
            return bad("objects larger than the mapped area".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disc {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandBlob {
    pub discs: Vec<Disc>,
    pub height: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Buoy {
    pub id: u32,
    pub center: [f64; 2],
    pub radius: f64,
    pub height: f64,
}

/// Elliptic hull moving at constant velocity, aligned with its motion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: u32,
    /// Position at time 0.
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub length: f64,
    pub beam: f64,
    pub height: f64,
}

impl Target {
    pub fn position(&self, time: f64) -> [f64; 2] {
        [
            self.start[0] + self.velocity[0] * time,
            self.start[1] + self.velocity[1] * time,
        ]
    }

    pub fn heading(&self) -> f64 {
        self.velocity[1].atan2(self.velocity[0])
    }

    /// Whether `(x, y)` lies inside the hull ellipse at `time`.
    pub fn contains(&self, time: f64, x: f64, y: f64) -> bool {
        let [cx, cy] = self.position(time);
        let (s, c) = self.heading().sin_cos();
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        let (a, b) = (self.length / 2.0, self.beam / 2.0);
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }
}

/// Constant speed and yaw rate; the own ship is at the world origin at
/// time `now`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub heading_now: f64,
    pub speed: f64,
    pub yaw_rate: f64,
    pub now: f64,
}

impl Trajectory {
    pub fn pose(&self, time: f64) -> Pose {
        let ds = time - self.now;
        let heading = self.heading_now + self.yaw_rate * ds;
        let (x, y) = if self.yaw_rate.abs() < 1e-12 {
            let (s, c) = self.heading_now.sin_cos();
            (self.speed * ds * c, self.speed * ds * s)
        } else {
            let k = self.speed / self.yaw_rate;
            (
                k * (heading.sin() - self.heading_now.sin()),
                k * (self.heading_now.cos() - heading.cos()),
            )
        };
        Pose::planar(x, y, heading, time)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub spec: SceneSpec,
    pub land: Vec<LandBlob>,
    pub buoys: Vec<Buoy>,
    pub targets: Vec<Target>,
    pub trajectory: Trajectory,
    pub timestamps: Vec<f64>,
}

/// Instance ids: land and shoreline use 1 and 2; buoys and targets get
/// unique ids from `FIRST_OBJECT_ID` on.
pub const LAND_ID: u32 = 1;
pub const SHORELINE_ID: u32 = 2;
pub const FIRST_OBJECT_ID: u32 = 16;

const MAX_ATTEMPTS: usize = 500;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl Scene {
    /// Signed distance to the land boundary: negative inside land.
    pub fn land_distance(&self, x: f64, y: f64) -> f64 {
        self.land
            .iter()
            .flat_map(|b| &b.discs)
            .map(|d| dist(d.center, [x, y]) - d.radius)
            .fold(f64::INFINITY, f64::min)
    }

    /// Highest-priority class at a world position and time.
    pub fn class_at(&self, time: f64, x: f64, y: f64) -> Class {
        if self.targets.iter().any(|t| t.contains(time, x, y)) {
            return Class::Target;
        }
        if self.buoys.iter().any(|b| dist(b.center, [x, y]) <= b.radius) {
            return Class::Buoy;
        }
        let sd = self.land_distance(x, y);
        if sd.abs() <= self.spec.shoreline_width / 2.0 {
            Class::Shoreline
        } else if sd < 0.0 {
            Class::Land
        } else {
            Class::Water
        }
    }

    pub fn pose(&self, instant: usize) -> Pose {
        self.trajectory.pose(self.timestamps[instant])
    }

    pub fn now(&self) -> f64 {
        *self.timestamps.last().expect("at least one instant")
    }

    /// Ground-truth classes of `grid` in the body frame of `pose` at
    /// `time`. Cells are labelled by their centers; cells containing a
    /// buoy or target center are labelled with that object as well.
    pub fn ground_truth(&self, grid: &BevGrid, pose: &Pose, time: f64) -> ClassMap {
        let mut map = ClassMap::filled(grid.cells_h, grid.cells_w, Class::Water);
        for r in 0..grid.cells_h {
            for c in 0..grid.cells_w {
                let (x, y) = grid.grid_to_world(r as f64 + 0.5, c as f64 + 0.5);
                let w = pose.to_world(&Vec3::new(x, y, 0.0));
                map.set(r, c, self.class_at(time, w.x, w.y));
            }
        }
        let centers = self
            .buoys
            .iter()
            .map(|b| (b.center, Class::Buoy))
            .chain(self.targets.iter().map(|t| (t.position(time), Class::Target)));
        for (p, class) in centers {
            let body = pose.to_body(&Vec3::new(p[0], p[1], 0.0));
            if let Ok((r, c)) = grid.world_to_cell(body.x, body.y) {
                if map.get(r, c) < class as u8 {
                    map.set(r, c, class);
                }
            }
        }
        map
    }
}

fn range_usize(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

fn range_f64(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Builds a scene deterministically from `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let timestamps: Vec<f64> = (0..spec.t).map(|i| i as f64 * spec.dt).collect();
    let trajectory = Trajectory {
        heading_now: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        speed: range_f64(&mut rng, spec.own_speed),
        yaw_rate: range_f64(&mut rng, spec.own_yaw_rate),
        now: *timestamps.last().expect("t >= 1"),
    };
    let track: Vec<[f64; 2]> = (0..=4 * spec.t.max(1))
        .map(|i| {
            let time = trajectory.now * i as f64 / (4 * spec.t.max(1)) as f64;
            let p = trajectory.pose(time).translation;
            [p.x, p.y]
        })
        .collect();
    let track_dist = |p: [f64; 2]| track.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let half = spec.extent_m / 2.0;
    let mut scene = Scene {
        spec: spec.clone(),
        land: Vec::new(),
        buoys: Vec::new(),
        targets: Vec::new(),
        trajectory,
        timestamps,
    };

    let n_blobs = range_usize(&mut rng, spec.land_blobs);
    for _ in 0..n_blobs {
        let n_discs = range_usize(&mut rng, spec.discs_per_blob);
        let height = range_f64(&mut rng, spec.land_height);
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let anchor = [rng.random_range(-half..half), rng.random_range(-half..half)];
            let discs: Vec<Disc> = (0..n_discs)
                .map(|i| {
                    let radius = range_f64(&mut rng, spec.land_radius);
                    let center = if i == 0 {
                        anchor
                    } else {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        let r = rng.random_range(0.3..0.9) * radius;
                        [anchor[0] + r * a.cos(), anchor[1] + r * a.sin()]
                    };
                    Disc { center, radius }
                })
                .collect();
            let ok = discs
                .iter()
                .all(|d| track_dist(d.center) > d.radius + spec.shoreline_width + spec.clearance);
            if ok {
                placed = Some(discs);
                break;
            }
        }
        let discs =
            placed.ok_or_else(|| Error::InfeasibleSpec("no room for land away from the own-ship track".into()))?;
        scene.land.push(LandBlob { discs, height });
    }

    let mut next_id = FIRST_OBJECT_ID;
    let n_buoys = range_usize(&mut rng, spec.buoy_count);
    for _ in 0..n_buoys {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let p = [rng.random_range(-half..half) * 0.8, rng.random_range(-half..half) * 0.8];
            let free = scene.land_distance(p[0], p[1]) > spec.shoreline_width + spec.buoy_radius
                && track_dist(p) > spec.clearance + spec.buoy_radius
                && scene.buoys.iter().all(|b| dist(b.center, p) > 3.0 * spec.buoy_radius);
            if free {
                placed = Some(p);
                break;
            }
        }
        let center = placed.ok_or_else(|| Error::InfeasibleSpec("no free water for buoys".into()))?;
        scene.buoys.push(Buoy {
            id: next_id,
            center,
            radius: spec.buoy_radius,
            height: spec.buoy_height,
        });
        next_id += 1;
    }

    let n_targets = range_usize(&mut rng, spec.target_count);
    let (length, beam) = spec.target_size;
    for _ in 0..n_targets {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let p = [rng.random_range(-half..half) * 0.7, rng.random_range(-half..half) * 0.7];
            let speed = range_f64(&mut rng, spec.target_speed);
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let velocity = [speed * dir.cos(), speed * dir.sin()];
            let now = scene.now();
            let start = [p[0] - velocity[0] * now, p[1] - velocity[1] * now];
            let cand = Target {
                id: next_id,
                start,
                velocity,
                length,
                beam,
                height: spec.target_height,
            };
            let free = scene.timestamps.iter().all(|&time| {
                let q = cand.position(time);
                q[0].abs() < half
                    && q[1].abs() < half
                    && scene.land_distance(q[0], q[1]) > spec.shoreline_width + length
                    && track_dist(q) > spec.clearance + length / 2.0
                    && scene.buoys.iter().all(|b| dist(b.center, q) > b.radius + length)
                    && scene.targets.iter().all(|t| dist(t.position(time), q) > 1.5 * length)
            });
            if free {
                placed = Some(cand);
                break;
            }
        }
        let target = placed.ok_or_else(|| Error::InfeasibleSpec("no free water for targets".into()))?;
        scene.targets.push(target);
        next_id += 1;
    }
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_serialization() {
        let spec = SceneSpec {
            seed: 11,
            ..SceneSpec::default()
        };
        let a = serde_json::to_string(&generate_scene(&spec).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_scene(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_scene_is_all_water() {
        let scene = generate_scene(&SceneSpec::empty(3)).unwrap();
        let grid = BevGrid::centered(20, 20, 30.0);
        let gt = scene.ground_truth(&grid, &scene.pose(2), scene.now());
        assert!(gt.classes.iter().all(|&c| c == Class::Water as u8));
    }

    #[test]
    fn buoy_lands_in_expected_cell() {
        let mut scene = generate_scene(&SceneSpec::empty(0)).unwrap();
        scene.trajectory.heading_now = 0.0;
        scene.buoys.push(Buoy {
            id: FIRST_OBJECT_ID,
            center: [0.0, 30.0],
            radius: 1.0,
            height: 2.0,
        });
        let grid = BevGrid::centered(200, 200, 3.0);
        let gt = scene.ground_truth(&grid, &scene.pose(2), scene.now());
        assert_eq!(gt.get(100, 110), Class::Buoy as u8);
    }

    #[test]
    fn straight_track_spacing() {
        let traj = Trajectory {
            heading_now: 0.3,
            speed: 5.0,
            yaw_rate: 0.0,
            now: 10.0,
        };
        let a = traj.pose(0.0).translation;
        let b = traj.pose(5.0).translation;
        assert!(((b - a).norm() - 25.0).abs() < 1e-12);
        assert!(traj.pose(10.0).translation.norm() < 1e-12);
    }

    #[test]
    fn turning_track_is_continuous() {
        let traj = Trajectory {
            heading_now: 1.0,
            speed: 4.0,
            yaw_rate: 0.02,
            now: 10.0,
        };
        let p = traj.pose(10.0 - 1e-6).translation;
        assert!((p.norm() - 4e-6).abs() < 1e-9);
    }

    #[test]
    fn infeasible_land_rejected() {
        let spec = SceneSpec {
            land_blobs: (40, 40),
            discs_per_blob: (4, 4),
            land_radius: (80.0, 90.0),
            ..SceneSpec::default()
        };
        assert!(matches!(generate_scene(&spec), Err(Error::InfeasibleSpec(_))));
    }
}
