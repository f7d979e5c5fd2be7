//! The full fusion network: encoders, cross-attention, temporal fusion
//! and decoder behind one parameter store.

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::encoders::{lwir_to_3ch, EncoderConfig, ImageEncoder, PseudoImageEncoder, TimeEmbedding, VectorEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{
    build_keys, fuse_multiscale, AttentionBlock, AttentionConfig, AttentionRecord, KeyGroup, ScaleKeys, ViewFeatures,
};
use crate::geometry::{bev_query_directions, BevGrid, CameraCalibration, Modality, Pose, QueryGrid, Vec3};
use crate::head::{Decoder, NUM_CLASSES};
use crate::nn::{Init, ParamStore};
use crate::scalar::Scalar;
use crate::temporal::{align_bev, TemporalFusion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_e: usize,
    pub d_m: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub image_channels: Vec<usize>,
    pub pseudo_h: usize,
    pub pseudo_w: usize,
    pub unet_channels: Vec<usize>,
    pub use_skips: bool,
    /// Feature downscale factors; attention runs from the largest to the
    /// smallest.
    pub scales: Vec<usize>,
    pub h_q: usize,
    pub w_q: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub meters_per_cell: f64,
    pub n_classes: usize,
    pub t: usize,
    pub decoder_channels: [usize; 3],
    /// Spatial extent of the time-fusing kernel (1 keeps the grid size).
    pub temporal_kernel: usize,
    /// Attend over keys of every instant jointly instead of per instant.
    pub all_instants: bool,
    /// Height statistics are divided by this many meters.
    pub z_scale: f64,
    /// Camera centers are divided by this many meters before embedding.
    pub center_scale: f64,
}

impl ModelConfig {
    /// Reduced dimensions for desk-scale training.
    pub fn toy() -> Self {
        Self {
            d_e: 32,
            d_m: 32,
            n_heads: 2,
            head_dim: 16,
            ffn_dim: 64,
            image_h: 48,
            image_w: 96,
            image_channels: vec![8, 16, 24, 32],
            pseudo_h: 96,
            pseudo_w: 96,
            unet_channels: vec![8, 16, 24, 32],
            use_skips: true,
            scales: vec![8, 16],
            h_q: 13,
            w_q: 13,
            map_h: 100,
            map_w: 100,
            meters_per_cell: 6.0,
            n_classes: NUM_CLASSES,
            t: 3,
            decoder_channels: [32, 24, 16],
            temporal_kernel: 1,
            all_instants: false,
            z_scale: 5.0,
            center_scale: 10.0,
        }
    }

    /// Full-size dimensions: 224x480 images, 25x25 queries of width 128,
    /// four heads of 64, 200x200 maps at 3 m per cell.
    pub fn paper() -> Self {
        Self {
            d_e: 128,
            d_m: 128,
            n_heads: 4,
            head_dim: 64,
            ffn_dim: 256,
            image_h: 224,
            image_w: 480,
            image_channels: vec![16, 32, 64, 128],
            pseudo_h: 112,
            pseudo_w: 112,
            unet_channels: vec![16, 32, 64, 128],
            use_skips: true,
            scales: vec![8, 16],
            h_q: 25,
            w_q: 25,
            map_h: 200,
            map_w: 200,
            meters_per_cell: 3.0,
            n_classes: NUM_CLASSES,
            t: 3,
            decoder_channels: [64, 32, 16],
            temporal_kernel: 1,
            all_instants: false,
            z_scale: 5.0,
            center_scale: 10.0,
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_e: self.d_e,
            scales: self.scales.clone(),
            image_h: self.image_h,
            image_w: self.image_w,
            channels_per_stage: self.image_channels.clone(),
            pseudo_h: self.pseudo_h,
            pseudo_w: self.pseudo_w,
            unet_channels: self.unet_channels.clone(),
            use_skips: self.use_skips,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            d_m: self.d_m,
            d_e: self.d_e,
            ffn_dim: self.ffn_dim,
        }
    }

    pub fn extent_m(&self) -> f64 {
        self.map_h as f64 * self.meters_per_cell
    }

    pub fn map_grid(&self) -> BevGrid {
        BevGrid::centered(self.map_h, self.map_w, self.meters_per_cell)
    }

    /// Metric layout of the query grid over the same extent as the map.
    pub fn query_bev_grid(&self) -> BevGrid {
        BevGrid::centered(self.h_q, self.w_q, self.extent_m() / self.h_q as f64)
    }

    /// Scales ordered coarse to fine.
    pub fn attention_order(&self) -> Vec<usize> {
        let mut s = self.scales.clone();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_e != self.d_m {
            return bad("d_e must equal d_m: the direction embedding is shared by keys and queries");
        }
        if self.n_heads == 0 || self.head_dim == 0 || self.t == 0 || self.n_classes == 0 {
            return bad("n_heads, head_dim, t and n_classes must be positive");
        }
        if self.h_q == 0 || self.w_q == 0 || self.map_h == 0 || self.map_w == 0 {
            return bad("query and map grids must be non-empty");
        }
        if self.map_h as f64 * self.meters_per_cell != self.map_w as f64 * self.meters_per_cell || self.h_q != self.w_q
        {
            return bad("map and query grids must be square");
        }
        if self.temporal_kernel % 2 == 0 || self.temporal_kernel > self.h_q {
            return bad("temporal_kernel must be odd and fit the query grid");
        }
        Ok(())
    }
}

/// One view at one instant: a camera image or a lidar pseudo-image.
#[derive(Clone, Debug)]
pub struct ViewInput<T: Scalar> {
    pub view_id: String,
    pub modality: Modality,
    /// Calibration at the input resolution, in the own-ship frame.
    pub cal: CameraCalibration,
    /// `[3, H, W]` RGB, `[1, H, W]` LWIR or `[5, H, W]` pseudo-image.
    pub image: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct InstantInput<T: Scalar> {
    pub views: Vec<ViewInput<T>>,
    pub pose: Pose,
}

/// Instants ordered oldest first; the last one is "now".
#[derive(Clone, Debug)]
pub struct ModelInput<T: Scalar> {
    pub instants: Vec<InstantInput<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T: Scalar> {
    /// `[C, map_h, map_w]`.
    pub logits: Tensor<T>,
    /// Latent map fed to the decoder, `[d_m, h, w]`.
    pub m_bev: Tensor<T>,
    /// Cross-attention output of every instant, `[n_bev, d_m]`.
    pub per_instant: Vec<Tensor<T>>,
    /// Attention of the current instant, one record per scale.
    pub records: Vec<AttentionRecord>,
}

pub struct FusionModel<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub image_enc: ImageEncoder<T>,
    pub pseudo_enc: PseudoImageEncoder<T>,
    pub phi: VectorEmbedding<T>,
    pub eps: VectorEmbedding<T>,
    pub iota: TimeEmbedding<T>,
    /// Learned map queries `[n_bev, d_m]`.
    pub queries: Tensor<T>,
    pub blocks: Vec<AttentionBlock<T>>,
    pub temporal: Option<TemporalFusion<T>>,
    pub decoder: Decoder<T>,
    query_dirs: Vec<Vec3>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let enc_cfg = cfg.encoder();
        let image_enc = ImageEncoder::new(&mut init, &enc_cfg);
        let pseudo_enc = PseudoImageEncoder::new(&mut init, &enc_cfg);
        let phi = VectorEmbedding::new(&mut init, "phi", cfg.d_e);
        let eps = VectorEmbedding::new(&mut init, "eps", cfg.d_m);
        let iota = TimeEmbedding::new(&mut init, "iota", cfg.t, cfg.d_e);
        let queries = init.normal("queries", &[cfg.h_q * cfg.w_q, cfg.d_m], 1.0);
        let att = cfg.attention();
        let blocks = cfg
            .attention_order()
            .iter()
            .map(|s| AttentionBlock::new(&mut init, &format!("attn{s}"), &att))
            .collect();
        let temporal =
            (cfg.t > 1).then(|| TemporalFusion::new(&mut init, "temporal", cfg.d_m, cfg.t, cfg.temporal_kernel));
        let decoder = Decoder::new(
            &mut init,
            cfg.d_m,
            &cfg.decoder_channels,
            cfg.n_classes,
            cfg.map_h,
            cfg.map_w,
        );
        let query_dirs = bev_query_directions(&QueryGrid::new(cfg.h_q, cfg.w_q))?;
        Ok(Self {
            cfg,
            store,
            image_enc,
            pseudo_enc,
            phi,
            eps,
            iota,
            queries,
            blocks,
            temporal,
            decoder,
            query_dirs,
        })
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.store.tensors()
    }

    pub fn query_directions(&self) -> &[Vec3] {
        &self.query_dirs
    }

    /// Feature maps of one view, ordered as `cfg.scales`.
    pub fn encode_view(&self, view: &ViewInput<T>) -> Result<Vec<Tensor<T>>> {
        match view.modality {
            Modality::Rgb => self.image_enc.forward(&view.image),
            Modality::Lwir => self.image_enc.forward(&lwir_to_3ch(&view.image)?),
            Modality::LidarPseudo => self.pseudo_enc.forward(&view.image),
        }
    }

    fn center_embeddings(&self, groups: &[KeyGroup<T>]) -> Result<Vec<Tensor<T>>> {
        let centers: Vec<Vec3> = groups.iter().map(|g| g.center / self.cfg.center_scale).collect();
        let emb = self.eps.forward(&centers)?;
        (0..groups.len())
            .map(|i| emb.slice(0, i, 1)?.reshape(&[self.cfg.d_m]))
            .collect()
    }

    /// Key groups per attention scale (coarse first) for the given
    /// instants; `tau0` is the time index of the first one.
    fn scale_keys(&self, instants: &[(usize, &InstantInput<T>)]) -> Result<Vec<ScaleKeys<T>>> {
        let mut encoded = Vec::new();
        for &(tau, inst) in instants {
            for view in &inst.views {
                encoded.push((tau, view, self.encode_view(view)?));
            }
        }
        self.cfg
            .attention_order()
            .into_iter()
            .map(|scale| {
                let si = self
                    .cfg
                    .scales
                    .iter()
                    .position(|&s| s == scale)
                    .expect("configured scale");
                let feats: Vec<ViewFeatures<'_, T>> = encoded
                    .iter()
                    .map(|(tau, view, maps)| ViewFeatures {
                        view_id: &view.view_id,
                        time: *tau,
                        map: &maps[si],
                        scale,
                        cal: Some(&view.cal),
                    })
                    .collect();
                let groups = build_keys(&feats, &self.phi, &self.iota)?;
                let center_embeddings = self.center_embeddings(&groups)?;
                Ok(ScaleKeys {
                    scale,
                    groups,
                    center_embeddings,
                })
            })
            .collect()
    }

    fn to_grid(&self, m: &Tensor<T>) -> Result<Tensor<T>> {
        m.transpose()?.reshape(&[self.cfg.d_m, self.cfg.h_q, self.cfg.w_q])
    }

    /// Runs the network. With a single instant the temporal block is
    /// bypassed; otherwise the instant count must equal `cfg.t`.
    pub fn forward(&self, input: &ModelInput<T>, record: bool) -> Result<ForwardOutput<T>> {
        let n = input.instants.len();
        if n == 0 || (n != 1 && n != self.cfg.t) {
            return Err(Error::shape(
                "forward",
                format!("{n} instants for a model with t = {}", self.cfg.t),
            ));
        }
        let tau0 = self.cfg.t - n;
        let dir_emb = self.phi.forward(&self.query_dirs)?;
        let indexed: Vec<(usize, &InstantInput<T>)> =
            input.instants.iter().enumerate().map(|(i, x)| (tau0 + i, x)).collect();

        let mut per_instant = Vec::new();
        let mut records = Vec::new();
        if self.cfg.all_instants {
            let keys = self.scale_keys(&indexed)?;
            let (m, rec) = fuse_multiscale(&self.queries, &dir_emb, &keys, &self.blocks, record)?;
            per_instant.push(m);
            records = rec;
        } else {
            for (i, item) in indexed.iter().enumerate() {
                let keys = self.scale_keys(std::slice::from_ref(item))?;
                let want = record && i + 1 == n;
                let (m, rec) = fuse_multiscale(&self.queries, &dir_emb, &keys, &self.blocks, want)?;
                per_instant.push(m);
                if want {
                    records = rec;
                }
            }
        }

        let now = &input.instants[n - 1].pose;
        let m_bev = match (&self.temporal, per_instant.len()) {
            (Some(tf), k) if k > 1 => {
                let grid = self.cfg.query_bev_grid();
                let aligned = per_instant
                    .iter()
                    .zip(&input.instants)
                    .map(|(m, inst)| align_bev(&self.to_grid(m)?, &inst.pose, now, &grid))
                    .collect::<Result<Vec<_>>>()?;
                tf.forward(&aligned)?
            }
            _ => self.to_grid(per_instant.last().expect("at least one instant"))?,
        };
        let logits = self.decoder.forward(&m_bev)?;
        Ok(ForwardOutput {
            logits,
            m_bev,
            per_instant,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configs_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::paper().validate().unwrap();
        let mut bad = ModelConfig::toy();
        bad.d_e = 16;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn attention_order_is_coarse_first() {
        assert_eq!(ModelConfig::toy().attention_order(), vec![16, 8]);
    }
}
