//! Map decoder, training losses and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::diff::{Backward, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init};
use crate::scalar::Scalar;

/// Semantic classes in ascending priority: when synthetic layers overlap,
/// the later class wins.
pub const CLASS_NAMES: [&str; 5] = ["water", "land", "shoreline", "buoy", "target"];
pub const NUM_CLASSES: usize = CLASS_NAMES.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Class {
    Water = 0,
    Land = 1,
    Shoreline = 2,
    Buoy = 3,
    Target = 4,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Water, Class::Land, Class::Shoreline, Class::Buoy, Class::Target];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }
}

/// Per-cell class indices of a BEV map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub h: usize,
    pub w: usize,
    pub classes: Vec<u8>,
}

impl ClassMap {
    pub fn filled(h: usize, w: usize, class: Class) -> Self {
        Self {
            h,
            w,
            classes: vec![class as u8; h * w],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.classes[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: Class) {
        self.classes[row * self.w + col] = class as u8;
    }

    /// Channel-first one-hot `[C, h, w]` encoding.
    pub fn one_hot(&self, n_classes: usize) -> Vec<f64> {
        let n = self.h * self.w;
        let mut out = vec![0.0; n_classes * n];
        for (p, &c) in self.classes.iter().enumerate() {
            out[c as usize * n + p] = 1.0;
        }
        out
    }

    /// Nearest-neighbour resampling to another grid size.
    pub fn resized(&self, h: usize, w: usize) -> Self {
        let mut classes = Vec::with_capacity(h * w);
        for r in 0..h {
            let sr = ((r as f64 + 0.5) * self.h as f64 / h as f64) as usize;
            for c in 0..w {
                let sc = ((c as f64 + 0.5) * self.w as f64 / w as f64) as usize;
                classes.push(self.get(sr.min(self.h - 1), sc.min(self.w - 1)));
            }
        }
        Self { h, w, classes }
    }
}

/// Three upsampling blocks followed by a resize to the map size and a
/// per-cell classifier.
#[derive(Clone, Debug)]
pub struct Decoder<T: Scalar> {
    pub blocks: Vec<Conv2d<T>>,
    pub classifier: Conv2d<T>,
    pub out_h: usize,
    pub out_w: usize,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(
        init: &mut Init<'_, T>,
        d_m: usize,
        channels: &[usize; 3],
        n_classes: usize,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        let mut c_in = d_m;
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(init, &format!("decoder.up{i}"), c_in, c, 3, 1, 1);
                c_in = c;
                conv
            })
            .collect();
        let classifier = Conv2d::new(init, "decoder.classifier", c_in, n_classes, 1, 1, 0);
        Self {
            blocks,
            classifier,
            out_h,
            out_w,
        }
    }

    /// `[d_m, h, w]` latent map to `[C, out_h, out_w]` logits.
    pub fn forward(&self, m: &Tensor<T>) -> Result<Tensor<T>> {
        let [_, mut h, mut w] = *m.shape() else {
            return Err(Error::shape("decode", format!("latent map {:?}", m.shape())));
        };
        let mut x = m.clone();
        for conv in &self.blocks {
            h *= 2;
            w *= 2;
            x = conv.forward(&x.bilinear_resize(h, w)?)?.silu()?;
        }
        if (h, w) != (self.out_h, self.out_w) {
            x = x.bilinear_resize(self.out_h, self.out_w)?;
        }
        self.classifier.forward(&x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Per-class weights; empty means 1 for every class.
    pub alpha: Vec<f64>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: Vec::new(),
        }
    }
}

impl FocalConfig {
    fn alpha(&self, c: usize) -> f64 {
        self.alpha.get(c).copied().unwrap_or(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Focal,
    CrossEntropy,
}

/// `ln(sigmoid(u))` without overflow.
fn log_sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Focal term and its derivative with respect to the logit for one
/// binary label.
pub fn focal_term(logit: f64, label: bool, gamma: f64, alpha: f64) -> (f64, f64) {
    let s = if label { 1.0 } else { -1.0 };
    let u = s * logit;
    let pt = sigmoid(u);
    let log_pt = log_sigmoid(u);
    let one_m = 1.0 - pt;
    let w = if gamma == 0.0 { 1.0 } else { one_m.powf(gamma) };
    let loss = -alpha * w * log_pt;
    let dloss_du = alpha * w * (gamma * pt * log_pt - one_m);
    (loss, s * dloss_du)
}

fn check_target(op: &'static str, logits: &Tensor<impl Scalar>, target: &ClassMap) -> Result<usize> {
    match *logits.shape() {
        [c, h, w] if h == target.h && w == target.w && target.classes.iter().all(|&k| (k as usize) < c) => Ok(c),
        _ => Err(Error::shape(
            op,
            format!("logits {:?} vs target {}x{}", logits.shape(), target.h, target.w),
        )),
    }
}

struct CachedGrad<T>(Vec<T>);

impl<T: Scalar> Backward<T> for CachedGrad<T> {
    fn backward(&self, _out: &Tensor<T>, g: &[T], _p: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let g0 = g[0];
        vec![Some(self.0.iter().map(|&v| v * g0).collect())]
    }
}

/// Mean per-class sigmoid focal loss of `[C, h, w]` logits against a
/// class map, averaged over all cells and classes.
pub fn focal_loss<T: Scalar>(logits: &Tensor<T>, target: &ClassMap, cfg: &FocalConfig) -> Result<Tensor<T>> {
    let c = check_target("focal_loss", logits, target)?;
    if cfg.gamma < 0.0 {
        return Err(Error::Config(format!("focal gamma {} < 0", cfg.gamma)));
    }
    let n = target.h * target.w;
    let norm = 1.0 / (c * n) as f64;
    let data = logits.data();
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(data.len());
    for k in 0..c {
        let alpha = cfg.alpha(k);
        for p in 0..n {
            let (l, d) = focal_term(
                data[k * n + p].as_f64(),
                target.classes[p] as usize == k,
                cfg.gamma,
                alpha,
            );
            total += l;
            grad.push(T::from_f64_lossy(d * norm));
        }
    }
    drop(data);
    Tensor::from_op(
        "focal_loss",
        vec![T::from_f64_lossy(total * norm)],
        vec![],
        vec![logits.clone()],
        Box::new(CachedGrad(grad)),
    )
}

/// Mean softmax cross-entropy over cells of `[C, h, w]` logits.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, target: &ClassMap) -> Result<Tensor<T>> {
    let c = check_target("cross_entropy_loss", logits, target)?;
    let n = target.h * target.w;
    let data = logits.data();
    let mut total = 0.0;
    let mut grad = vec![T::zero(); data.len()];
    for p in 0..n {
        let max = (0..c)
            .map(|k| data[k * n + p].as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (data[k * n + p].as_f64() - max).exp()).sum();
        let y = target.classes[p] as usize;
        total += z.ln() + max - data[y * n + p].as_f64();
        for k in 0..c {
            let prob = (data[k * n + p].as_f64() - max).exp() / z;
            let d = prob - if k == y { 1.0 } else { 0.0 };
            grad[k * n + p] = T::from_f64_lossy(d / n as f64);
        }
    }
    drop(data);
    Tensor::from_op(
        "cross_entropy_loss",
        vec![T::from_f64_lossy(total / n as f64)],
        vec![],
        vec![logits.clone()],
        Box::new(CachedGrad(grad)),
    )
}

pub fn loss<T: Scalar>(
    kind: LossKind,
    logits: &Tensor<T>,
    target: &ClassMap,
    focal: &FocalConfig,
) -> Result<Tensor<T>> {
    match kind {
        LossKind::Focal => focal_loss(logits, target, focal),
        LossKind::CrossEntropy => cross_entropy_loss(logits, target),
    }
}

/// Per-cell argmax over the class axis of `[C, h, w]` scores; ties go to
/// the lowest class index.
pub fn predict_classes<T: Scalar>(scores: &Tensor<T>) -> Result<ClassMap> {
    let [c, h, w] = *scores.shape() else {
        return Err(Error::shape("predict_classes", format!("scores {:?}", scores.shape())));
    };
    if c == 0 {
        return Err(Error::shape("predict_classes", "no classes"));
    }
    let n = h * w;
    let data = scores.data();
    let classes = (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if data[k * n + p] > data[best * n + p] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    Ok(ClassMap { h, w, classes })
}

/// Intersection and union counts accumulated over any number of maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self {
            intersection: vec![0; n_classes],
            union: vec![0; n_classes],
        }
    }

    pub fn add(&mut self, pred: &ClassMap, gt: &ClassMap) -> Result<()> {
        if (pred.h, pred.w) != (gt.h, gt.w) {
            return Err(Error::shape(
                "iou",
                format!("pred {}x{} vs gt {}x{}", pred.h, pred.w, gt.h, gt.w),
            ));
        }
        let n = self.intersection.len();
        for (&p, &g) in pred.classes.iter().zip(&gt.classes) {
            let (p, g) = (p as usize, g as usize);
            if p >= n || g >= n {
                return Err(Error::IndexOutOfRange {
                    what: "class",
                    index: p.max(g),
                    len: n,
                });
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn report(&self) -> IouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { per_class, mean }
    }
}

pub fn iou_multiclass(pred: &ClassMap, gt: &ClassMap, n_classes: usize) -> Result<IouReport> {
    let mut acc = IouAccumulator::new(n_classes);
    acc.add(pred, gt)?;
    Ok(acc.report())
}
