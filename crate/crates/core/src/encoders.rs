//! Per-modality feature extractors and the positional projections.
//!
//! All feature maps are channel-first `[d_e, h, w]` tensors.

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::{Conv2d, Init, Linear};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_e: usize,
    /// Downscale factors of the emitted feature maps, e.g. `[8, 16]`.
    pub scales: Vec<usize>,
    pub image_h: usize,
    pub image_w: usize,
    /// Widths of the stride-2 stages; stage `i` sits at scale `2^(i+1)`.
    pub channels_per_stage: Vec<usize>,
    pub pseudo_h: usize,
    pub pseudo_w: usize,
    /// Widths of the pseudo-image encoder levels (scales 2, 4, 8, 16).
    pub unet_channels: Vec<usize>,
    pub use_skips: bool,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.channels_per_stage.len();
        for &s in &self.scales {
            if !s.is_power_of_two() || s < 2 || s > 1 << stages {
                return Err(Error::Config(format!(
                    "scale {s} is not reachable with {stages} stride-2 stages"
                )));
            }
            for (what, len) in [
                ("image_h", self.image_h),
                ("image_w", self.image_w),
                ("pseudo_h", self.pseudo_h),
                ("pseudo_w", self.pseudo_w),
            ] {
                if len % s != 0 {
                    return Err(Error::Config(format!("{what}={len} not divisible by scale {s}")));
                }
            }
        }
        if self.unet_channels.len() != 4 {
            return Err(Error::Config("unet_channels needs 4 levels".into()));
        }
        if self.scales.iter().any(|&s| s != 8 && s != 16) {
            return Err(Error::Config("pseudo-image encoder emits scales 8 and 16 only".into()));
        }
        Ok(())
    }
}

/// One encoded view at one scale.
#[derive(Clone, Debug)]
pub struct FeatureMap<T: Scalar> {
    /// `[d_e, h_f, w_f]`.
    pub values: Tensor<T>,
    pub scale: usize,
}

/// Replicates a `[1, H, W]` image into three identical channels.
pub fn lwir_to_3ch<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    match img.shape() {
        [1, _, _] => Tensor::concat(&[img.clone(), img.clone(), img.clone()], 0),
        s => Err(Error::shape("lwir_to_3ch", format!("expected [1, H, W], got {s:?}"))),
    }
}

/// Strided convolution pyramid shared by every camera view.
#[derive(Clone, Debug)]
pub struct ImageEncoder<T: Scalar> {
    stages: Vec<(Conv2d<T>, Conv2d<T>)>,
    taps: Vec<(usize, Conv2d<T>)>,
    image_h: usize,
    image_w: usize,
}

impl<T: Scalar> ImageEncoder<T> {
    pub fn new(init: &mut Init<'_, T>, cfg: &EncoderConfig) -> Self {
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (i, &c) in cfg.channels_per_stage.iter().enumerate() {
            let down = Conv2d::new(init, &format!("image_enc.stage{i}.down"), c_in, c, 3, 2, 1);
            let mix = Conv2d::new(init, &format!("image_enc.stage{i}.mix"), c, c, 3, 1, 1);
            stages.push((down, mix));
            c_in = c;
        }
        let taps = cfg
            .scales
            .iter()
            .map(|&s| {
                let stage = s.trailing_zeros() as usize - 1;
                let c = cfg.channels_per_stage[stage];
                (
                    stage,
                    Conv2d::new(init, &format!("image_enc.tap{s}"), c, cfg.d_e, 1, 1, 0),
                )
            })
            .collect();
        Self {
            stages,
            taps,
            image_h: cfg.image_h,
            image_w: cfg.image_w,
        }
    }

    /// Encodes a `[3, H, W]` image into one map per configured scale.
    pub fn forward(&self, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if img.shape() != [3, self.image_h, self.image_w] {
            return Err(Error::shape(
                "encode_image",
                format!(
                    "expected [3, {}, {}], got {:?}",
                    self.image_h,
                    self.image_w,
                    img.shape()
                ),
            ));
        }
        let last = self.taps.iter().map(|(s, _)| *s).max().unwrap_or(0);
        let mut acts = Vec::new();
        let mut x = img.clone();
        for (down, mix) in &self.stages[..=last] {
            x = down.forward(&x)?.silu()?;
            x = mix.forward(&x)?.silu()?;
            acts.push(x.clone());
        }
        self.taps.iter().map(|(s, proj)| proj.forward(&acts[*s])).collect()
    }

    /// Final 1x1 projections, one per scale.
    pub fn taps(&self) -> impl Iterator<Item = &Conv2d<T>> {
        self.taps.iter().map(|(_, c)| c)
    }

    pub fn first_conv(&self) -> &Conv2d<T> {
        &self.stages[0].0
    }
}

/// U-Net-shaped encoder for `[5, H, W]` lidar pseudo-images
/// (four statistics plus occupancy).
#[derive(Clone, Debug)]
pub struct PseudoImageEncoder<T: Scalar> {
    down: Vec<Conv2d<T>>,
    up_mix: Conv2d<T>,
    tap8: Option<Conv2d<T>>,
    tap16: Option<Conv2d<T>>,
    scales: Vec<usize>,
    skip_channels: usize,
    pub use_skips: bool,
    pseudo_h: usize,
    pseudo_w: usize,
}

pub const PSEUDO_CHANNELS: usize = 5;

impl<T: Scalar> PseudoImageEncoder<T> {
    pub fn new(init: &mut Init<'_, T>, cfg: &EncoderConfig) -> Self {
        let ch = &cfg.unet_channels;
        let mut down = Vec::new();
        let mut c_in = PSEUDO_CHANNELS;
        for (i, &c) in ch.iter().enumerate() {
            down.push(Conv2d::new(init, &format!("pseudo_enc.down{i}"), c_in, c, 3, 2, 1));
            c_in = c;
        }
        let up_mix = Conv2d::new(init, "pseudo_enc.up_mix", ch[3] + ch[2], ch[2], 3, 1, 1);
        let has = |s| cfg.scales.contains(&s);
        let tap8 = has(8).then(|| Conv2d::new(init, "pseudo_enc.tap8", ch[2], cfg.d_e, 1, 1, 0));
        let tap16 = has(16).then(|| Conv2d::new(init, "pseudo_enc.tap16", ch[3], cfg.d_e, 1, 1, 0));
        Self {
            down,
            up_mix,
            tap8,
            tap16,
            scales: cfg.scales.clone(),
            skip_channels: ch[2],
            use_skips: cfg.use_skips,
            pseudo_h: cfg.pseudo_h,
            pseudo_w: cfg.pseudo_w,
        }
    }

    pub fn forward(&self, pimg: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if pimg.shape() != [PSEUDO_CHANNELS, self.pseudo_h, self.pseudo_w] {
            return Err(Error::shape(
                "encode_pseudo_image",
                format!(
                    "expected [{PSEUDO_CHANNELS}, {}, {}], got {:?}",
                    self.pseudo_h,
                    self.pseudo_w,
                    pimg.shape()
                ),
            ));
        }
        let mut x = pimg.clone();
        let mut levels = Vec::new();
        for conv in &self.down {
            x = conv.forward(&x)?.silu()?;
            levels.push(x.clone());
        }
        let (skip, bottom) = (&levels[2], &levels[3]);
        let [_, h8, w8] = *skip.shape() else { unreachable!() };
        let up = bottom.bilinear_resize(h8, w8)?;
        let skip = if self.use_skips {
            skip.clone()
        } else {
            Tensor::zeros(&[self.skip_channels, h8, w8])
        };
        let dec8 = self.up_mix.forward(&Tensor::concat(&[up, skip], 0)?)?.silu()?;
        self.scales
            .iter()
            .map(|&s| match (s, &self.tap8, &self.tap16) {
                (8, Some(p), _) => p.forward(&dec8),
                (16, _, Some(p)) => p.forward(bottom),
                _ => Err(Error::ScaleMismatch { expected: 8, got: s }),
            })
            .collect()
    }
}

/// Bias-free linear map from 3-vectors (directions or positions) to
/// `width` features.
#[derive(Clone, Debug)]
pub struct VectorEmbedding<T: Scalar> {
    pub linear: Linear<T>,
}

impl<T: Scalar> VectorEmbedding<T> {
    pub fn new(init: &mut Init<'_, T>, name: &str, width: usize) -> Self {
        Self {
            linear: Linear::new(init, name, 3, width, false),
        }
    }

    /// Embeds a batch of vectors into an `[n, width]` tensor.
    pub fn forward(&self, v: &[Vec3]) -> Result<Tensor<T>> {
        let data: Vec<f64> = v.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        self.linear.forward(&Tensor::from_f64(&data, &[v.len(), 3])?)
    }
}

/// Learned per-instant embedding table `[t, width]`.
#[derive(Clone, Debug)]
pub struct TimeEmbedding<T: Scalar> {
    pub table: Tensor<T>,
}

impl<T: Scalar> TimeEmbedding<T> {
    pub fn new(init: &mut Init<'_, T>, name: &str, t: usize, width: usize) -> Self {
        Self {
            table: init.normal(name, &[t, width], 0.1),
        }
    }

    pub fn len(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row `tau` as a `[width]` tensor.
    pub fn forward(&self, tau: usize) -> Result<Tensor<T>> {
        if tau >= self.len() {
            return Err(Error::IndexOutOfRange {
                what: "time index",
                index: tau,
                len: self.len(),
            });
        }
        let width = self.table.shape()[1];
        self.table.slice(0, tau, 1)?.reshape(&[width])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            d_e: 8,
            scales: vec![8, 16],
            image_h: 32,
            image_w: 48,
            channels_per_stage: vec![4, 4, 6, 8],
            pseudo_h: 32,
            pseudo_w: 32,
            unet_channels: vec![4, 4, 6, 8],
            use_skips: true,
        }
    }

    #[test]
    fn lwir_replication() {
        let x = Tensor::<f64>::from_vec(vec![0.5; 6], &[1, 2, 3]).unwrap();
        let y = lwir_to_3ch(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2, 3]);
        assert!(y.to_vec().iter().all(|&v| v == 0.5));
        assert!(lwir_to_3ch(&y).is_err());
    }

    #[test]
    fn image_feature_shapes() {
        let mut store = ParamStore::<f64>::new();
        let enc = ImageEncoder::new(&mut Init::new(&mut store, 1), &cfg());
        let out = enc.forward(&Tensor::full(&[3, 32, 48], 0.3)).unwrap();
        assert_eq!(out[0].shape(), &[8, 4, 6]);
        assert_eq!(out[1].shape(), &[8, 2, 3]);
        assert!(enc.forward(&Tensor::zeros(&[3, 16, 48])).is_err());
    }

    #[test]
    fn pseudo_feature_shapes_and_empty_input() {
        let mut store = ParamStore::<f64>::new();
        let enc = PseudoImageEncoder::new(&mut Init::new(&mut store, 1), &cfg());
        let out = enc.forward(&Tensor::zeros(&[5, 32, 32])).unwrap();
        assert_eq!(out[0].shape(), &[8, 4, 4]);
        assert_eq!(out[1].shape(), &[8, 2, 2]);
        assert!(out.iter().all(|t| t.to_vec().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn time_embedding_bounds() {
        let mut store = ParamStore::<f64>::new();
        let iota = TimeEmbedding::new(&mut Init::new(&mut store, 1), "iota", 3, 4);
        let rows: Vec<_> = (0..3).map(|t| iota.forward(t).unwrap().to_vec()).collect();
        assert_eq!(rows[1], iota.table.to_vec()[4..8].to_vec());
        assert!(matches!(iota.forward(3), Err(Error::IndexOutOfRange { .. })));
    }
}
