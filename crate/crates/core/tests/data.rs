mod common;

use bevfuse::data::augment::ViewWarp;
use bevfuse::data::container::TenFile;
use bevfuse::data::render::{render_camera, render_camera_sized};
use bevfuse::data::rig::SensorRig;
use bevfuse::data::sample::{generate_dataset, render_sample, SynthConfig};
use bevfuse::data::scene::{generate_scene, Scene, SceneSpec};
use bevfuse::data::{augment, read_dataset, read_sample, write_dataset, AugmentConfig};
use bevfuse::geometry::{CameraCalibration, Pose, Vec3};
use bevfuse::head::{ClassMap, CLASS_NAMES};
use bevfuse::model::ModelConfig;
use bevfuse::train::{load_checkpoint, save_checkpoint, TrainConfig, Trainer};
use bevfuse::Error;
use common::{centroid, micro_model};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain).
fn hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<(f64, f64)> = Vec::new();
    for pass in 0..2 {
        let start = out.len();
        for &p in &pts {
            while out.len() >= start + 2 && cross(out[out.len() - 2], out[out.len() - 1], p) <= 0.0 {
                out.pop();
            }
            out.push(p);
        }
        out.pop();
        if pass == 0 {
            pts.reverse();
        }
    }
    out
}

/// Forward-projection oracle: pixels whose centers fall inside the convex
/// hull of the projected top and bottom outlines of the scene's only
/// object. The object is a convex solid, so the hull is its silhouette.
fn projected_silhouette(
    scene: &Scene,
    time: f64,
    pose: &Pose,
    cal: &CameraCalibration,
    h: usize,
    w: usize,
) -> Vec<bool> {
    let (center, (a, b), heading, height) = match (scene.buoys.first(), scene.targets.first()) {
        (Some(o), _) => (o.center, (o.radius, o.radius), 0.0, o.height),
        (_, Some(t)) => (t.position(time), (t.length / 2.0, t.beam / 2.0), t.heading(), t.height),
        _ => unreachable!(),
    };
    let (s, c) = f64::sin_cos(heading);
    let n = 2000;
    let mut pts = Vec::with_capacity(2 * n);
    for i in 0..n {
        let phi = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        let (lx, ly) = (a * phi.cos(), b * phi.sin());
        for z in [0.0, height] {
            let world = Vec3::new(center[0] + c * lx - s * ly, center[1] + s * lx + c * ly, z);
            let p = cal.project(&pose.to_body(&world)).unwrap();
            pts.push((p.u, p.v));
        }
    }
    let poly = hull(pts);
    (0..h * w)
        .map(|p| {
            let q = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
            (0..poly.len()).all(|i| cross(poly[i], poly[(i + 1) % poly.len()], q) >= 0.0)
        })
        .collect()
}

/// Per fully visible object view: distance between the rendered
/// silhouette centroid and (forward-projected silhouette centroid,
/// projected object center).
fn centroid_errors(cfg: &SynthConfig) -> Vec<(f64, f64)> {
    let mut errs = Vec::new();
    for sample in generate_dataset(cfg).unwrap() {
        let scene = sample.scene.as_ref().unwrap();
        for (tau, frame) in sample.instants.iter().enumerate() {
            let time = scene.timestamps[tau];
            let objects: Vec<(u32, [f64; 2], f64)> = scene
                .buoys
                .iter()
                .map(|b| (b.id, b.center, b.height))
                .chain(scene.targets.iter().map(|t| (t.id, t.position(time), t.height)))
                .collect();
            for &(id, center, height) in &objects {
                // Render the object alone so occluders do not bias the mask.
                let alone = Scene {
                    land: vec![],
                    buoys: scene.buoys.iter().filter(|b| b.id == id).cloned().collect(),
                    targets: scene.targets.iter().filter(|t| t.id == id).cloned().collect(),
                    ..scene.clone()
                };
                for cam in &frame.cameras {
                    let (img, ids) = render_camera(&alone, time, &frame.pose, &cam.cal).unwrap();
                    let (h, w) = (img.h, img.w);
                    let on_border = (0..h * w)
                        .any(|p| ids[p] == id && (p % w == 0 || p % w == w - 1 || p / w == 0 || p / w == h - 1));
                    let Some((cu, cv)) = centroid(w, ids.iter().map(|&i| i == id)) else {
                        continue;
                    };
                    if on_border {
                        continue;
                    }
                    let fwd = projected_silhouette(&alone, time, &frame.pose, &cam.cal, h, w);
                    let (fu, fv) = centroid(w, fwd.into_iter()).unwrap();
                    let body = frame.pose.to_body(&Vec3::new(center[0], center[1], height / 2.0));
                    let p = cam.cal.project(&body).unwrap();
                    errs.push((
                        ((fu - cu).powi(2) + (fv - cv).powi(2)).sqrt(),
                        ((p.u - cu).powi(2) + (p.v - cv).powi(2)).sqrt(),
                    ));
                }
            }
        }
    }
    errs
}

#[test]
fn rendered_objects_agree_with_calibration() {
    let cfg = SynthConfig::for_model(&ModelConfig::toy(), 8, 42);
    let errs = centroid_errors(&cfg);
    assert!(errs.len() > 50);
    for (fwd, _) in &errs {
        assert!(*fwd <= 1.0, "silhouette centroid off by {fwd} px");
    }
    // Extended objects far off-axis shift the centroid away from the
    // projected center; most views still land within a pixel.
    let near = errs.iter().filter(|(_, c)| *c <= 1.0).count();
    assert!(near * 10 >= errs.len() * 8, "{near} of {}", errs.len());
}

#[test]
fn recorded_miscalibration_moves_projections() {
    let mut cfg = SynthConfig::for_model(&ModelConfig::toy(), 2, 42);
    cfg.miscalibration_deg = 3.0;
    let sample = render_sample(&cfg, 0).unwrap();
    let clean = render_sample(
        &SynthConfig {
            miscalibration_deg: 0.0,
            ..cfg.clone()
        },
        0,
    )
    .unwrap();
    // Images are rendered with the true calibration; only records differ.
    for (a, b) in sample.now().cameras.iter().zip(&clean.now().cameras) {
        assert_eq!(a.image, b.image);
        assert_ne!(a.cal.extrinsic, b.cal.extrinsic);
    }
}

#[test]
fn ground_truth_is_one_hot_with_priority() {
    let cfg = SynthConfig::for_model(&ModelConfig::toy(), 4, 7);
    for s in generate_dataset(&cfg).unwrap() {
        assert_eq!(s.gt.classes.len(), s.gt.h * s.gt.w);
        let onehot = s.gt.one_hot(CLASS_NAMES.len());
        for p in 0..s.gt.classes.len() {
            let sum: f64 = (0..CLASS_NAMES.len()).map(|k| onehot[k * s.gt.classes.len() + p]).sum();
            assert_eq!(sum, 1.0);
        }
        // Every target center is labelled as target.
        let scene = s.scene.as_ref().unwrap();
        for t in &scene.targets {
            let pos = t.position(scene.now());
            let body = s.now().pose.to_body(&Vec3::new(pos[0], pos[1], 0.0));
            if let Ok((r, c)) = s.grid.world_to_cell(body.x, body.y) {
                assert_eq!(s.gt.get(r, c), 4);
            }
        }
    }
}

#[test]
fn generation_is_deterministic_to_the_byte() {
    let mut cfg = SynthConfig::for_model(&ModelConfig::toy(), 3, 11);
    cfg.rig = SensorRig::with_counts(2, 1, 2, 48, 96);
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(da.path(), &a, Some(&cfg)).unwrap();
    write_dataset(db.path(), &b, Some(&cfg)).unwrap();
    let files = |root: &std::path::Path| {
        let mut out = Vec::new();
        for dir in std::fs::read_dir(root).unwrap() {
            let dir = dir.unwrap().path();
            if dir.is_dir() {
                for f in std::fs::read_dir(&dir).unwrap() {
                    let f = f.unwrap().path();
                    out.push((f.strip_prefix(root).unwrap().to_owned(), std::fs::read(&f).unwrap()));
                }
            } else {
                out.push((dir.strip_prefix(root).unwrap().to_owned(), std::fs::read(&dir).unwrap()));
            }
        }
        out.sort();
        out
    };
    assert_eq!(files(da.path()), files(db.path()));
}

#[test]
fn dataset_round_trip_is_exact() {
    let mut cfg = SynthConfig::for_model(&ModelConfig::toy(), 2, 3);
    cfg.miscalibration_deg = 1.0;
    cfg.miscalibration_m = 0.2;
    let samples = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &samples, Some(&cfg)).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, samples);
}

#[test]
fn corrupted_containers_are_rejected() {
    let cfg = SynthConfig::for_model(&micro_model(), 1, 3);
    let samples = generate_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &samples, None).unwrap();
    let sdir = dir.path().join(&samples[0].sample_id);
    let gt = sdir.join("gt.ten");
    let bytes = std::fs::read(&gt).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    std::fs::write(&gt, &bad_magic).unwrap();
    assert!(matches!(read_sample(&sdir), Err(Error::CorruptContainer(_))));

    std::fs::write(&gt, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_sample(&sdir), Err(Error::CorruptContainer(_))));

    let mut bad_dtype = bytes.clone();
    bad_dtype[4] = 9;
    std::fs::write(&gt, &bad_dtype).unwrap();
    assert!(matches!(read_sample(&sdir), Err(Error::CorruptContainer(_))));

    assert!(matches!(TenFile::decode(&bytes[..3]), Err(Error::CorruptContainer(_))));

    std::fs::write(&gt, &bytes).unwrap();
    assert!(read_sample(&sdir).is_ok());
    std::fs::remove_file(sdir.join("manifest.json")).unwrap();
    assert!(matches!(read_sample(&sdir), Err(Error::MissingManifest(_))));
}

fn micro_trainer() -> (Trainer<f64>, Vec<(bevfuse::model::ModelInput<f64>, ClassMap)>) {
    let model = micro_model();
    let mut cfg = SynthConfig::for_model(&model, 2, 1);
    cfg.rig = SensorRig::with_counts(1, 1, 1, model.image_h, model.image_w);
    let samples = generate_dataset(&cfg).unwrap();
    let tc = TrainConfig {
        model,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let batch = bevfuse::train::prepare_inputs(&samples, &tc.model, tc.inputs).unwrap();
    (Trainer::new(tc).unwrap(), batch)
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let (mut a, batch) = micro_trainer();
    a.train_step(&batch).unwrap();
    a.train_step(&batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &a).unwrap();
    let mut b = load_checkpoint::<f64>(dir.path(), None).unwrap();
    assert_eq!(b.step, a.step);
    assert_eq!(b.opt.step, a.opt.step);
    for ((na, ta), (nb, tb)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(na, nb);
        assert!(ta
            .to_vec()
            .iter()
            .zip(tb.to_vec())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for (sa, sb) in a.opt.states.iter().zip(&b.opt.states) {
        assert!(sa.m.iter().zip(&sb.m).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(sa.v.iter().zip(&sb.v).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // Resuming continues exactly where the original left off.
    let la = a.train_step(&batch).unwrap();
    let lb = b.train_step(&batch).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
}

#[test]
fn checkpoint_corruption_is_reported() {
    let (a, _) = micro_trainer();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &a).unwrap();
    let victim = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "ten"))
        .unwrap();
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(dir.path(), None),
        Err(Error::CorruptContainer(_))
    ));
    std::fs::remove_file(dir.path().join("manifest.json")).unwrap();
    assert!(matches!(
        load_checkpoint::<f64>(dir.path(), None),
        Err(Error::MissingManifest(_))
    ));
}

/// Pixel position after the warp, derived in normalized image coordinates:
/// rotate about the optical axis, then crop and rescale.
fn warp_pixel(cal: &CameraCalibration, warp: &ViewWarp, u: f64, v: f64) -> (f64, f64) {
    let k = &cal.intrinsic;
    let (fx, fy, cx, cy, sk) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], k[(0, 1)]);
    let y = (v - cy) / fy;
    let x = (u - cx - sk * y) / fx;
    let (s, c) = warp.theta.sin_cos();
    let (xr, yr) = (c * x - s * y, s * x + c * y);
    let (u2, v2) = (fx * xr + sk * yr + cx, fy * yr + cy);
    ((u2 - warp.dx) / warp.scale, (v2 - warp.dy) / warp.scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn augmented_calibration_tracks_landmarks(
        seed in any::<u64>(),
        scale in 0.5f64..1.0,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
        theta in -0.2f64..0.2,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cal = common::random_calibration(&mut rng);
        let (w, h) = (2.0 * cal.intrinsic[(0, 2)], 2.0 * cal.intrinsic[(1, 2)]);
        let warp = ViewWarp { scale, dx: fx * (1.0 - scale) * w, dy: fy * (1.0 - scale) * h, theta };
        let new_cal = warp.apply_to_calibration(&cal).unwrap();
        for _ in 0..8 {
            let x = common::point_in_frustum(&mut rng, &cal);
            let p = cal.project(&x).unwrap();
            let q = new_cal.project(&x).unwrap();
            let (u, v) = warp_pixel(&cal, &warp, p.u, p.v);
            prop_assert!((q.u - u).abs() <= 0.5 && (q.v - v).abs() <= 0.5);
            prop_assert!((q.u - u).abs() < 1e-6 && (q.v - v).abs() < 1e-6);
        }
    }
}

#[test]
fn augmented_images_follow_their_calibration() {
    let spec = SceneSpec {
        seed: 5,
        land_blobs: (0, 0),
        target_count: (0, 0),
        buoy_count: (1, 1),
        buoy_radius: 6.0,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec).unwrap();
    let pose = scene.pose(spec.t - 1);
    let buoy = &scene.buoys[0];
    // A camera looking straight at the buoy.
    let rel = pose.to_body(&Vec3::new(buoy.center[0], buoy.center[1], 0.0));
    let cam = bevfuse::data::rig::CameraSpec {
        view_id: "rgb0".into(),
        modality: bevfuse::geometry::Modality::Rgb,
        yaw: rel.y.atan2(rel.x),
        pitch_down: (12.0f64).atan2((rel.x * rel.x + rel.y * rel.y).sqrt()),
        hfov_deg: 20.0,
        vfov_deg: 20.0,
        position: [0.0, 0.0, 12.0],
        width: 96,
        height: 96,
    };
    let cal = cam.calibration().unwrap();
    let (img, _) = render_camera(&scene, scene.now(), &pose, &cal).unwrap();
    let is_buoy = |px: &[u8]| px == bevfuse::data::render::class_rgb(bevfuse::head::Class::Buoy);
    for (i, warp) in [
        ViewWarp {
            scale: 0.8,
            dx: 5.0,
            dy: 12.0,
            theta: 0.0,
        },
        ViewWarp {
            scale: 1.0,
            dx: 0.0,
            dy: 0.0,
            theta: 0.15,
        },
        ViewWarp {
            scale: 0.7,
            dx: 20.0,
            dy: 3.0,
            theta: -0.1,
        },
    ]
    .iter()
    .enumerate()
    {
        let new_cal = warp.apply_to_calibration(&cal).unwrap();
        let warped = warp.apply_to_image(&img, &cal).unwrap();
        let got = centroid(96, (0..96 * 96).map(|p| is_buoy(warped.pixel(p / 96, p % 96)))).unwrap();
        let (rendered, _) = render_camera_sized(&scene, scene.now(), &pose, &new_cal, 96, 96).unwrap();
        let want = centroid(96, (0..96 * 96).map(|p| is_buoy(rendered.pixel(p / 96, p % 96)))).unwrap();
        let d = ((got.0 - want.0).powi(2) + (got.1 - want.1).powi(2)).sqrt();
        assert!(d <= 0.5, "warp {i}: warped centroid {got:?} vs re-rendered {want:?}");
    }
}

#[test]
fn augmentation_is_seeded_and_keeps_labels() {
    let cfg = SynthConfig::for_model(&ModelConfig::toy(), 1, 2);
    let s = render_sample(&cfg, 0).unwrap();
    let acfg = AugmentConfig {
        min_crop: 0.7,
        rotation_deg: 5.0,
        brightness: 20.0,
        contrast: 0.2,
        dropout: 0.3,
        seed: 9,
    };
    let a = augment(&s, &acfg, 1).unwrap();
    assert_eq!(a, augment(&s, &acfg, 1).unwrap());
    assert_ne!(a, augment(&s, &acfg, 2).unwrap());
    assert_eq!(a.gt, s.gt);
}
