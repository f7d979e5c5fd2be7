//! Central-difference gradient cases for every differentiable operation
//! and for the full model, shared by the gradient tests and the
//! acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use bevfuse::data::rig::SensorRig;
use bevfuse::data::sample::{render_sample, to_model_input, InputOptions, SynthConfig};
use bevfuse::diff::gradcheck::check_gradients;
use bevfuse::diff::{ResamplePlan, Tensor};
use bevfuse::geometry::{BevGrid, Pose};
use bevfuse::head::{cross_entropy_loss, focal_loss, ClassMap, FocalConfig};
use bevfuse::model::{FusionModel, ModelConfig};
use bevfuse::temporal::align_bev;
use bevfuse::train::resize_target;
use bevfuse::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

pub type Case = (Vec<Tensor<f64>>, Box<dyn Fn() -> Result<Tensor<f64>>>);

fn rand_param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::parameter((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

fn rand_const(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
}

/// Contracts `out` with fixed random weights so every output entry
/// contributes a distinct amount.
fn project(out: &Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    out.mul(w)?.sum()
}

/// Largest relative error of one case over all seeds.
pub fn certify(name: &str, build: fn(&mut ChaCha8Rng) -> Case) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let (inputs, loss) = build(&mut rng);
        let rep = check_gradients(|| loss(), &inputs, H, 64, seed).unwrap();
        if rep.max_rel_err >= worst.0 {
            worst = (rep.max_rel_err, format!("{name} seed {seed} at {:?}", rep.worst));
        }
    }
    worst
}

macro_rules! unary {
    ($name:ident, $shape:expr, |$x:ident| $body:expr) => {
        fn $name(rng: &mut ChaCha8Rng) -> Case {
            let $x = rand_param(rng, &$shape);
            let probe = (|| -> Result<Tensor<f64>> {
                let $x = &$x.detach();
                $body
            })()
            .unwrap();
            let w = rand_const(rng, probe.shape());
            let x2 = $x.clone();
            (
                vec![$x],
                Box::new(move || {
                    let $x = &x2;
                    let out: Result<Tensor<f64>> = (|| $body)();
                    project(&out?, &w)
                }),
            )
        }
    };
}
unary!(scale, [3, 4], |x| x.scale(1.7));
unary!(add_scalar, [3, 4], |x| x.add_scalar(-0.3));
unary!(silu, [2, 5], |x| x.silu());
unary!(sigmoid, [2, 5], |x| x.sigmoid());
unary!(exp, [2, 5], |x| x.exp());
unary!(ln, [2, 5], |x| x.square()?.add_scalar(0.5)?.ln());
unary!(square, [2, 5], |x| x.square());
unary!(sum, [3, 3], |x| x.sum());
unary!(mean, [3, 3], |x| x.mean());
unary!(reshape, [2, 6], |x| x.reshape(&[3, 4]));
unary!(permute, [2, 3, 4], |x| x.permute(&[2, 0, 1]));
unary!(transpose, [3, 5], |x| x.transpose());
unary!(slice, [4, 5], |x| x.slice(1, 1, 3));
unary!(select_rows, [5, 3], |x| x.select_rows(&[4, 0, 4, 2]));
unary!(softmax, [3, 6], |x| x.softmax());
unary!(bilinear_resize, [2, 3, 4], |x| x.bilinear_resize(7, 5));

fn relu(rng: &mut ChaCha8Rng) -> Case {
    // Inputs are kept away from the kink.

    let n = 12;
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let a: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                a
            } else {
                -a
            }
        })
        .collect();
    let x = Tensor::parameter(v, &[3, 4]).unwrap();
    let w = rand_const(rng, &[3, 4]);
    let x2 = x.clone();
    (vec![x], Box::new(move || project(&x2.relu()?, &w)))
}

fn binary_broadcasting(rng: &mut ChaCha8Rng) -> Case {
    let a = rand_param(rng, &[3, 4]);
    let b = rand_param(rng, &[4]);
    let c = rand_param(rng, &[]);
    let w = rand_const(rng, &[3, 4]);
    let (a2, b2, c2) = (a.clone(), b.clone(), c.clone());
    (
        vec![a, b, c],
        Box::new(move || {
            let y = a2.add(&b2)?.mul(&a2)?.sub(&c2)?.mul(&b2)?;
            project(&y, &w)
        }),
    )
}

fn matmul_batched(rng: &mut ChaCha8Rng) -> Case {
    let a = rand_param(rng, &[2, 3, 4]);
    let b = rand_param(rng, &[2, 4, 5]);
    let w = rand_const(rng, &[2, 3, 5]);
    let (a2, b2) = (a.clone(), b.clone());
    (vec![a, b], Box::new(move || project(&a2.matmul(&b2)?, &w)))
}

fn linear(rng: &mut ChaCha8Rng) -> Case {
    let x = rand_param(rng, &[5, 3]);
    let wt = rand_param(rng, &[3, 4]);
    let b = rand_param(rng, &[4]);
    let w = rand_const(rng, &[5, 4]);
    let (x2, wt2, b2) = (x.clone(), wt.clone(), b.clone());
    (
        vec![x, wt, b],
        Box::new(move || project(&x2.linear(&wt2, Some(&b2))?, &w)),
    )
}

fn concat_and_stack(rng: &mut ChaCha8Rng) -> Case {
    let a = rand_param(rng, &[2, 3]);
    let b = rand_param(rng, &[2, 2]);
    let c = rand_param(rng, &[2, 5]);
    let w = rand_const(rng, &[2, 2, 5]);
    let (a2, b2, c2) = (a.clone(), b.clone(), c.clone());
    (
        vec![a, b, c],
        Box::new(move || {
            let ab = Tensor::concat(&[a2.clone(), b2.clone()], 1)?;
            project(&Tensor::stack(&[ab, c2.clone()])?, &w)
        }),
    )
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Case {
    let x = rand_param(rng, &[4, 6]);
    let g = rand_param(rng, &[6]);
    let b = rand_param(rng, &[6]);
    let w = rand_const(rng, &[4, 6]);
    let (x2, g2, b2) = (x.clone(), g.clone(), b.clone());
    (
        vec![x, g, b],
        Box::new(move || project(&x2.layer_norm(&g2, &b2, 1e-5)?, &w)),
    )
}

fn conv2d_strided_padded(rng: &mut ChaCha8Rng) -> Case {
    let stride = 1 + rng.random_range(0..2usize);
    let pad = rng.random_range(0..2usize);
    let x = rand_param(rng, &[2, 7, 6]);
    let k = rand_param(rng, &[3, 2, 3, 3]);
    let b = rand_param(rng, &[3]);
    let probe = x.detach().conv2d(&k.detach(), None, stride, pad).unwrap();
    let w = rand_const(rng, probe.shape());
    let (x2, k2, b2) = (x.clone(), k.clone(), b.clone());
    (
        vec![x, k, b],
        Box::new(move || project(&x2.conv2d(&k2, Some(&b2), stride, pad)?, &w)),
    )
}

fn conv3d_valid(rng: &mut ChaCha8Rng) -> Case {
    let x = rand_param(rng, &[2, 3, 5, 4]);
    let k = rand_param(rng, &[3, 2, 3, 3, 3]);
    let b = rand_param(rng, &[3]);
    let probe = x.detach().conv3d(&k.detach(), None).unwrap();
    let w = rand_const(rng, probe.shape());
    let (x2, k2, b2) = (x.clone(), k.clone(), b.clone());
    (
        vec![x, k, b],
        Box::new(move || project(&x2.conv3d(&k2, Some(&b2))?, &w)),
    )
}

fn resample_arbitrary_points(rng: &mut ChaCha8Rng) -> Case {
    let pts: Vec<(f64, f64)> = (0..20)
        .map(|_| (rng.random_range(-1.5..5.5), rng.random_range(-1.5..4.5)))
        .collect();
    let plan = Arc::new(ResamplePlan::from_points(5, 4, 4, 5, |r, c| pts[r * 5 + c]));
    let x = rand_param(rng, &[2, 5, 4]);
    let w = rand_const(rng, &[2, 4, 5]);
    let x2 = x.clone();
    (vec![x], Box::new(move || project(&x2.resample(&plan)?, &w)))
}

fn bev_alignment(rng: &mut ChaCha8Rng) -> Case {
    let grid = BevGrid::centered(6, 6, 10.0);
    let then = Pose::planar(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-0.3..0.3),
        0.0,
    );
    let now = Pose::planar(0.0, 0.0, 0.0, 5.0);
    let x = rand_param(rng, &[2, 6, 6]);
    let w = rand_const(rng, &[2, 6, 6]);
    let x2 = x.clone();
    (
        vec![x],
        Box::new(move || project(&align_bev(&x2, &then, &now, &grid)?, &w)),
    )
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ClassMap {
    ClassMap {
        h,
        w,
        classes: (0..h * w).map(|_| rng.random_range(0..c) as u8).collect(),
    }
}

fn focal_loss_grad(rng: &mut ChaCha8Rng) -> Case {
    let x = rand_param(rng, &[5, 3, 4]);
    let target = random_map(rng, 3, 4, 5);
    let cfg = FocalConfig {
        gamma: rng.random_range(0.0..3.0),
        alpha: vec![0.25, 0.5, 1.0, 2.0, 0.75],
    };
    let x2 = x.clone();
    (vec![x], Box::new(move || focal_loss(&x2.scale(3.0)?, &target, &cfg)))
}

fn cross_entropy_grad(rng: &mut ChaCha8Rng) -> Case {
    let x = rand_param(rng, &[5, 3, 4]);
    let target = random_map(rng, 3, 4, 5);
    let x2 = x.clone();
    (vec![x], Box::new(move || cross_entropy_loss(&x2.scale(3.0)?, &target)))
}

/// Full model at toy dimensions on a reduced rig: each seed checks two
/// entries of six parameter tensors, rotating through all of them.
pub fn certify_model() -> (f64, String) {
    let model_cfg = ModelConfig::toy();
    let mut synth = SynthConfig::for_model(&model_cfg, SEEDS as usize, 5);
    synth.rig = SensorRig::with_counts(1, 1, 1, model_cfg.image_h, model_cfg.image_w);
    let mut worst = (0.0, String::new());
    for seed in 0..SEEDS {
        let model = FusionModel::<f64>::new(model_cfg.clone(), seed).unwrap();
        let sample = render_sample(&synth, seed as usize).unwrap();
        let input = to_model_input::<f64>(&sample, &model_cfg, InputOptions::default()).unwrap();
        let target = resize_target(&sample.gt, &model_cfg);
        let focal = FocalConfig::default();
        let loss = || focal_loss(&model.forward(&input, false)?.logits, &target, &focal);
        let named: Vec<_> = model.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let chosen: Vec<_> = (0..6)
            .map(|k| named[(seed as usize * 6 + k * 7) % named.len()].clone())
            .collect();
        let tensors: Vec<_> = chosen.iter().map(|(_, t)| t.clone()).collect();
        // The loss sums thousands of terms, so smaller steps drown in rounding.
        let rep = check_gradients(loss, &tensors, 1e-4, 2, seed).unwrap();
        if rep.max_rel_err >= worst.0 {
            let at = rep.worst.map(|w| chosen[w.0].0.clone()).unwrap_or_default();
            worst = (rep.max_rel_err, format!("model seed {seed} at {at}"));
        }
    }
    worst
}

pub const OPS: &[(&str, fn(&mut ChaCha8Rng) -> Case)] = &[
    ("scale", scale),
    ("add_scalar", add_scalar),
    ("relu", relu),
    ("silu", silu),
    ("sigmoid", sigmoid),
    ("exp", exp),
    ("ln", ln),
    ("square", square),
    ("sum", sum),
    ("mean", mean),
    ("reshape", reshape),
    ("permute", permute),
    ("transpose", transpose),
    ("slice", slice),
    ("select_rows", select_rows),
    ("softmax", softmax),
    ("bilinear_resize", bilinear_resize),
    ("add_sub_mul", binary_broadcasting),
    ("matmul", matmul_batched),
    ("linear", linear),
    ("concat_stack", concat_and_stack),
    ("layer_norm", layer_norm),
    ("conv2d", conv2d_strided_padded),
    ("conv3d", conv3d_valid),
    ("resample", resample_arbitrary_points),
    ("align_bev", bev_alignment),
    ("focal_loss", focal_loss_grad),
    ("cross_entropy", cross_entropy_grad),
];
