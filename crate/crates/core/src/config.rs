//! Flat `key = value` run configuration with `BEVFUSE_` environment
//! overrides.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma
//! separated. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::head::LossKind;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "BEVFUSE_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub checkpoint_dir: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            checkpoint_dir: None,
            report_path: None,
        }
    }
}

/// Every accepted key, in the order written by [`RunConfig::to_text`].
pub const KEYS: &[&str] = &[
    "paper_dims",
    "d_e",
    "d_m",
    "n_heads",
    "head_dim",
    "ffn_dim",
    "image_h",
    "image_w",
    "image_channels",
    "pseudo_h",
    "pseudo_w",
    "unet_channels",
    "use_skips",
    "scales",
    "h_q",
    "w_q",
    "map_h",
    "map_w",
    "meters_per_cell",
    "n_classes",
    "t",
    "decoder_channels",
    "temporal_kernel",
    "all_instants",
    "z_scale",
    "center_scale",
    "loss",
    "focal_gamma",
    "focal_alpha",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "warmup_steps",
    "batch_size",
    "max_steps",
    "seed",
    "eval_every",
    "stop_at_miou",
    "aug_min_crop",
    "aug_rotation_deg",
    "aug_brightness",
    "aug_contrast",
    "aug_dropout",
    "aug_seed",
    "use_rgb",
    "use_lwir",
    "use_lidar",
    "checkpoint_dir",
    "report_path",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. `paper_dims = true` replaces every model field with
    /// the full-size values, so it should come first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "paper_dims" => {
                if parse_bool(key, v)? {
                    *m = ModelConfig::paper();
                }
            }
            "d_e" => m.d_e = parse(key, v)?,
            "d_m" => m.d_m = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "head_dim" => m.head_dim = parse(key, v)?,
            "ffn_dim" => m.ffn_dim = parse(key, v)?,
            "image_h" => m.image_h = parse(key, v)?,
            "image_w" => m.image_w = parse(key, v)?,
            "image_channels" => m.image_channels = parse_list(key, v)?,
            "pseudo_h" => m.pseudo_h = parse(key, v)?,
            "pseudo_w" => m.pseudo_w = parse(key, v)?,
            "unet_channels" => m.unet_channels = parse_list(key, v)?,
            "use_skips" => m.use_skips = parse_bool(key, v)?,
            "scales" => m.scales = parse_list(key, v)?,
            "h_q" => m.h_q = parse(key, v)?,
            "w_q" => m.w_q = parse(key, v)?,
            "map_h" => m.map_h = parse(key, v)?,
            "map_w" => m.map_w = parse(key, v)?,
            "meters_per_cell" => m.meters_per_cell = parse(key, v)?,
            "n_classes" => m.n_classes = parse(key, v)?,
            "t" => m.t = parse(key, v)?,
            "decoder_channels" => {
                let d: Vec<usize> = parse_list(key, v)?;
                m.decoder_channels = d
                    .try_into()
                    .map_err(|_| Error::Config("decoder_channels needs exactly 3 values".into()))?;
            }
            "temporal_kernel" => m.temporal_kernel = parse(key, v)?,
            "all_instants" => m.all_instants = parse_bool(key, v)?,
            "z_scale" => m.z_scale = parse(key, v)?,
            "center_scale" => m.center_scale = parse(key, v)?,
            "loss" => {
                t.loss = match v {
                    "focal" => LossKind::Focal,
                    "cross_entropy" => LossKind::CrossEntropy,
                    _ => {
                        return Err(Error::Config(format!(
                            "loss: expected focal or cross_entropy, got {v:?}"
                        )))
                    }
                }
            }
            "focal_gamma" => t.focal.gamma = parse(key, v)?,
            "focal_alpha" => t.focal.alpha = parse_list(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "eps" => t.eps = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_steps" => t.max_steps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "eval_every" => t.eval_every = parse(key, v)?,
            "stop_at_miou" => {
                t.stop_at_miou = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "aug_min_crop" => t.augment.min_crop = parse(key, v)?,
            "aug_rotation_deg" => t.augment.rotation_deg = parse(key, v)?,
            "aug_brightness" => t.augment.brightness = parse(key, v)?,
            "aug_contrast" => t.augment.contrast = parse(key, v)?,
            "aug_dropout" => t.augment.dropout = parse(key, v)?,
            "aug_seed" => t.augment.seed = parse(key, v)?,
            "use_rgb" => t.inputs.rgb = parse_bool(key, v)?,
            "use_lwir" => t.inputs.lwir = parse_bool(key, v)?,
            "use_lidar" => t.inputs.lidar = parse_bool(key, v)?,
            "checkpoint_dir" => self.checkpoint_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "report_path" => self.report_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`; a `paper_dims` line is applied
    /// before all others regardless of position.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(pairs)
    }

    fn apply_pairs(&mut self, mut pairs: Vec<(String, String)>) -> Result<()> {
        pairs.sort_by_key(|(k, _)| k != "paper_dims");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `BEVFUSE_<KEY>` variables, e.g. `BEVFUSE_LR=0.001`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let pairs = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        self.apply_pairs(pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for p in self.checkpoint_dir.iter().chain(&self.report_path) {
            let parent = p.parent().filter(|q| !q.as_os_str().is_empty());
            if let Some(parent) = parent {
                if !parent.exists() {
                    return Err(Error::Config(format!("directory {} does not exist", parent.display())));
                }
            }
        }
        Ok(())
    }

    /// Writes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("d_e", m.d_e.to_string());
        kv("d_m", m.d_m.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("head_dim", m.head_dim.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("image_h", m.image_h.to_string());
        kv("image_w", m.image_w.to_string());
        kv("image_channels", list(&m.image_channels));
        kv("pseudo_h", m.pseudo_h.to_string());
        kv("pseudo_w", m.pseudo_w.to_string());
        kv("unet_channels", list(&m.unet_channels));
        kv("use_skips", m.use_skips.to_string());
        kv("scales", list(&m.scales));
        kv("h_q", m.h_q.to_string());
        kv("w_q", m.w_q.to_string());
        kv("map_h", m.map_h.to_string());
        kv("map_w", m.map_w.to_string());
        kv("meters_per_cell", m.meters_per_cell.to_string());
        kv("n_classes", m.n_classes.to_string());
        kv("t", m.t.to_string());
        kv("decoder_channels", list(&m.decoder_channels));
        kv("temporal_kernel", m.temporal_kernel.to_string());
        kv("all_instants", m.all_instants.to_string());
        kv("z_scale", m.z_scale.to_string());
        kv("center_scale", m.center_scale.to_string());
        kv(
            "loss",
            match t.loss {
                LossKind::Focal => "focal",
                LossKind::CrossEntropy => "cross_entropy",
            }
            .to_string(),
        );
        kv("focal_gamma", t.focal.gamma.to_string());
        kv("focal_alpha", list(&t.focal.alpha));
        kv("lr", t.lr.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", t.eps.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_steps", t.max_steps.to_string());
        kv("seed", t.seed.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("stop_at_miou", t.stop_at_miou.map_or("none".into(), |v| v.to_string()));
        kv("aug_min_crop", t.augment.min_crop.to_string());
        kv("aug_rotation_deg", t.augment.rotation_deg.to_string());
        kv("aug_brightness", t.augment.brightness.to_string());
        kv("aug_contrast", t.augment.contrast.to_string());
        kv("aug_dropout", t.augment.dropout.to_string());
        kv("aug_seed", t.augment.seed.to_string());
        kv("use_rgb", t.inputs.rgb.to_string());
        kv("use_lwir", t.inputs.lwir.to_string());
        kv("use_lidar", t.inputs.lidar.to_string());
        kv(
            "checkpoint_dir",
            self.checkpoint_dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        kv(
            "report_path",
            self.report_path
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        out
    }
}

/// SHA-256 of the canonical JSON form of a training config, hex encoded.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 3.5e-4;
        cfg.train.model.scales = vec![8];
        cfg.train.stop_at_miou = Some(0.9);
        cfg.train.focal.alpha = vec![0.25, 1.0];
        cfg.checkpoint_dir = Some("ckpt".into());
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn every_written_key_is_known() {
        let text = RunConfig::default().to_text();
        for line in text.lines() {
            let key = line.split('=').next().unwrap().trim();
            assert!(KEYS.contains(&key), "{key}");
        }
    }

    #[test]
    fn env_overrides_and_paper_dims_first() {
        let mut cfg = RunConfig::parse("h_q = 7\npaper_dims = true\n").unwrap();
        assert_eq!(cfg.train.model.h_q, 7);
        assert_eq!(cfg.train.model.d_m, 128);
        cfg.apply_env([
            ("BEVFUSE_LR".to_string(), "0.5".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr = fast"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("just text"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_changes() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
