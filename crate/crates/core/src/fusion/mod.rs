//! View-aware cross-attention from map queries to ray-tagged feature keys.
//!
//! Keys are grouped by `(time, view)`. Every group is scored against the
//! query set built for that view's camera center, and the softmax runs
//! jointly over the concatenation of all groups.

mod saliency;

pub use saliency::{extract_saliency, first_principal_projection};

use crate::diff::Tensor;
use crate::encoders::{TimeEmbedding, VectorEmbedding};
use crate::error::{Error, Result};
use crate::geometry::{CameraCalibration, Vec3};
use crate::nn::{Init, LayerNorm, Linear};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_m: usize,
    pub d_e: usize,
    pub ffn_dim: usize,
}

impl AttentionConfig {
    pub fn inner(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// One view's feature map at one instant and scale, ready for lifting.
#[derive(Clone, Copy, Debug)]
pub struct ViewFeatures<'a, T: Scalar> {
    pub view_id: &'a str,
    pub time: usize,
    /// `[d_e, h, w]`.
    pub map: &'a Tensor<T>,
    pub scale: usize,
    /// Calibration at the view's input resolution.
    pub cal: Option<&'a CameraCalibration>,
}

/// Key tokens of one `(time, view)` group.
#[derive(Clone, Debug)]
pub struct KeyGroup<T: Scalar> {
    pub view_id: String,
    pub time: usize,
    pub grid: (usize, usize),
    /// Embedded keys `f + phi(rho) + iota(tau)`, `[h*w, d_e]`.
    pub keys: Tensor<T>,
    /// Raw features `f`, `[h*w, d_e]`.
    pub values: Tensor<T>,
    /// Unit ray per token, row-major over the feature grid.
    pub directions: Vec<Vec3>,
    pub center: Vec3,
}

impl<T: Scalar> KeyGroup<T> {
    pub fn len(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Lifts every feature cell to a key token; cell `(r, c)` of a map at
/// downscale `s` uses the ray through its center under the intrinsic
/// rescaled by `1/s`.
pub fn build_keys<T: Scalar>(
    features: &[ViewFeatures<'_, T>],
    phi: &VectorEmbedding<T>,
    iota: &TimeEmbedding<T>,
) -> Result<Vec<KeyGroup<T>>> {
    features
        .iter()
        .map(|vf| {
            let cal = vf
                .cal
                .ok_or_else(|| Error::MissingCalibration(vf.view_id.to_string()))?;
            let [d_e, h, w] = *vf.map.shape() else {
                return Err(Error::shape("build_keys", format!("feature map {:?}", vf.map.shape())));
            };
            let directions = cal.scaled(1.0 / vf.scale as f64).grid_rays(h, w)?;
            let values = vf.map.reshape(&[d_e, h * w])?.transpose()?;
            let keys = values.add(&phi.forward(&directions)?)?.add(&iota.forward(vf.time)?)?;
            Ok(KeyGroup {
                view_id: vf.view_id.to_string(),
                time: vf.time,
                grid: (h, w),
                keys,
                values,
                directions,
                center: cal.center,
            })
        })
        .collect()
}

/// Queries for every key group: `content + phi(b) - eps(c_k)`.
#[derive(Clone, Debug)]
pub struct BevQuerySet<T: Scalar> {
    /// `[n_bev, d_m]`.
    pub content: Tensor<T>,
    /// One `[n_bev, d_m]` tensor per key group.
    pub per_view: Vec<Tensor<T>>,
}

/// `direction_embedding` is `phi(b)` as `[n_bev, d_m]`; each entry of
/// `center_embeddings` is `eps(c_k)` as `[d_m]`.
pub fn build_queries<T: Scalar>(
    content: &Tensor<T>,
    direction_embedding: &Tensor<T>,
    center_embeddings: &[Tensor<T>],
) -> Result<BevQuerySet<T>> {
    let base = content.add(direction_embedding)?;
    let per_view = center_embeddings.iter().map(|e| base.sub(e)).collect::<Result<_>>()?;
    Ok(BevQuerySet {
        content: content.clone(),
        per_view,
    })
}

/// Query, key, value and output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttnProjections<T: Scalar> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl<T: Scalar> AttnProjections<T> {
    pub fn new(init: &mut Init<'_, T>, name: &str, cfg: &AttentionConfig) -> Self {
        let inner = cfg.inner();
        Self {
            wq: Linear::new(init, &format!("{name}.wq"), cfg.d_m, inner, false),
            wk: Linear::new(init, &format!("{name}.wk"), cfg.d_e, inner, false),
            wv: Linear::new(init, &format!("{name}.wv"), cfg.d_e, inner, false),
            wo: Linear::new(init, &format!("{name}.wo"), inner, cfg.d_m, true),
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim,
        }
    }
}

/// Where each key position of an attention record came from.
#[derive(Clone, Debug, PartialEq)]
pub struct KeySpan {
    pub view_id: String,
    pub time: usize,
    pub grid: (usize, usize),
    pub offset: usize,
}

/// Attention weights `[n_heads, n_bev, L]`, row-major.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub n_heads: usize,
    pub n_bev: usize,
    pub seq_len: usize,
    pub weights: Vec<f64>,
    pub spans: Vec<KeySpan>,
    pub scale: usize,
}

impl AttentionRecord {
    pub fn weight(&self, head: usize, query: usize, key: usize) -> f64 {
        self.weights[(head * self.n_bev + query) * self.seq_len + key]
    }

    pub fn span(&self, view_id: &str, time: usize) -> Option<&KeySpan> {
        self.spans.iter().find(|s| s.view_id == view_id && s.time == time)
    }
}

fn split_heads<T: Scalar>(x: &Tensor<T>, heads: usize, dim: usize, axes: &[usize]) -> Result<Tensor<T>> {
    let n = x.shape()[0];
    x.reshape(&[n, heads, dim])?.permute(axes)
}

/// Multi-head attention of the per-view queries over all key groups with
/// one joint softmax; returns `residual + W_o(attention)`.
pub fn cross_attend<T: Scalar>(
    queries: &BevQuerySet<T>,
    keys: &[KeyGroup<T>],
    proj: &AttnProjections<T>,
    residual: &Tensor<T>,
    record: bool,
) -> Result<(Tensor<T>, Option<AttentionRecord>)> {
    if keys.iter().all(KeyGroup::is_empty) {
        return Err(Error::EmptyKeySequence);
    }
    if queries.per_view.len() != keys.len() {
        return Err(Error::shape(
            "cross_attend",
            format!("{} query sets for {} key groups", queries.per_view.len(), keys.len()),
        ));
    }
    let (h, d) = (proj.n_heads, proj.head_dim);
    let n_q = queries.content.shape()[0];
    let mut scores = Vec::with_capacity(keys.len());
    for (q, g) in queries.per_view.iter().zip(keys) {
        let qh = split_heads(&proj.wq.forward(q)?, h, d, &[1, 0, 2])?;
        let kh = split_heads(&proj.wk.forward(&g.keys)?, h, d, &[1, 2, 0])?;
        scores.push(qh.matmul(&kh)?);
    }
    let weights = Tensor::concat(&scores, 2)?
        .scale(T::from_f64_lossy(1.0 / (d as f64).sqrt()))?
        .softmax()?;
    let values: Vec<_> = keys.iter().map(|g| g.values.clone()).collect();
    let vh = split_heads(&proj.wv.forward(&Tensor::concat(&values, 0)?)?, h, d, &[1, 0, 2])?;
    let out = weights.matmul(&vh)?.permute(&[1, 0, 2])?.reshape(&[n_q, h * d])?;
    let out = proj.wo.forward(&out)?.add(residual)?;
    let rec = record.then(|| {
        let mut offset = 0;
        let spans = keys
            .iter()
            .map(|g| {
                let s = KeySpan {
                    view_id: g.view_id.clone(),
                    time: g.time,
                    grid: g.grid,
                    offset,
                };
                offset += g.len();
                s
            })
            .collect();
        AttentionRecord {
            n_heads: h,
            n_bev: n_q,
            seq_len: offset,
            weights: weights.to_f64_vec(),
            spans,
            scale: 0,
        }
    });
    Ok((out, rec))
}

/// Pre-norm cross-attention plus feed-forward, both residual.
#[derive(Clone, Debug)]
pub struct AttentionBlock<T: Scalar> {
    pub norm_q: LayerNorm<T>,
    pub proj: AttnProjections<T>,
    pub norm_ffn: LayerNorm<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T: Scalar> AttentionBlock<T> {
    pub fn new(init: &mut Init<'_, T>, name: &str, cfg: &AttentionConfig) -> Self {
        Self {
            norm_q: LayerNorm::new(init, &format!("{name}.norm_q"), cfg.d_m),
            proj: AttnProjections::new(init, &format!("{name}.attn"), cfg),
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), cfg.d_m),
            ffn_in: Linear::new(init, &format!("{name}.ffn_in"), cfg.d_m, cfg.ffn_dim, true),
            ffn_out: Linear::new(init, &format!("{name}.ffn_out"), cfg.ffn_dim, cfg.d_m, true),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        direction_embedding: &Tensor<T>,
        center_embeddings: &[Tensor<T>],
        keys: &[KeyGroup<T>],
        record: bool,
    ) -> Result<(Tensor<T>, Option<AttentionRecord>)> {
        let queries = build_queries(&self.norm_q.forward(x)?, direction_embedding, center_embeddings)?;
        let (h, rec) = cross_attend(&queries, keys, &self.proj, x, record)?;
        let ffn = self
            .ffn_out
            .forward(&self.ffn_in.forward(&self.norm_ffn.forward(&h)?)?.silu()?)?;
        Ok((h.add(&ffn)?, rec))
    }
}

/// Keys and center embeddings for one feature scale.
#[derive(Clone, Debug)]
pub struct ScaleKeys<T: Scalar> {
    pub scale: usize,
    pub groups: Vec<KeyGroup<T>>,
    /// `eps(c_k)` per group.
    pub center_embeddings: Vec<Tensor<T>>,
}

/// Runs one attention stage per scale, coarse to fine; each stage's
/// output is the next stage's query content. Returns `[n_bev, d_m]`.
pub fn fuse_multiscale<T: Scalar>(
    learned_queries: &Tensor<T>,
    direction_embedding: &Tensor<T>,
    scales: &[ScaleKeys<T>],
    blocks: &[AttentionBlock<T>],
    record: bool,
) -> Result<(Tensor<T>, Vec<AttentionRecord>)> {
    if scales.len() != blocks.len() {
        return Err(Error::ScaleMismatch {
            expected: blocks.len(),
            got: scales.len(),
        });
    }
    let mut x = learned_queries.clone();
    let mut records = Vec::new();
    for (sk, block) in scales.iter().zip(blocks) {
        let (y, rec) = block.forward(&x, direction_embedding, &sk.center_embeddings, &sk.groups, record)?;
        if let Some(mut r) = rec {
            r.scale = sk.scale;
            records.push(r);
        }
        x = y;
    }
    Ok((x, records))
}
