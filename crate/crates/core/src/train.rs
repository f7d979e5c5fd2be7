//! Training loop, evaluation and checkpoints.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentConfig};
use crate::data::container::TenFile;
use crate::data::sample::{permutation, to_model_input, DatasetSample, InputOptions};
use crate::diff::{no_grad, AdamState, AdamW, AdamWParams, LrSchedule, Tensor, WarmupConstant};
use crate::error::{Error, Result};
use crate::head::{loss, predict_classes, ClassMap, FocalConfig, IouAccumulator, IouReport, LossKind};
use crate::model::{FusionModel, ModelConfig, ModelInput};
use crate::scalar::{DType, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossKind,
    pub focal: FocalConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Evaluate on the training samples every this many steps (0 = never).
    pub eval_every: usize,
    /// Stop once a periodic evaluation reaches this mean IoU.
    pub stop_at_miou: Option<f64>,
    pub augment: AugmentConfig,
    pub inputs: InputOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy(),
            loss: LossKind::Focal,
            focal: FocalConfig::default(),
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 20,
            batch_size: 4,
            max_steps: 2000,
            seed: 42,
            eval_every: 50,
            stop_at_miou: None,
            augment: AugmentConfig::none(),
            inputs: InputOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWParams {
        AdamWParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> WarmupConstant {
        WarmupConstant {
            base_lr: self.lr,
            warmup_steps: self.warmup_steps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub iou: IouReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    pub fn best_miou(&self) -> Option<f64> {
        self.evals.iter().map(|e| e.iou.mean).reduce(f64::max)
    }
}

pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub model: FusionModel<T>,
    pub opt: AdamW<T>,
    /// Updates applied so far.
    pub step: usize,
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = FusionModel::new(cfg.model.clone(), cfg.seed)?;
        let opt = AdamW::new(&model.parameters(), cfg.adamw());
        Ok(Self {
            cfg,
            model,
            opt,
            step: 0,
        })
    }

    fn sample_loss(&self, input: &ModelInput<T>, gt: &ClassMap) -> Result<Tensor<T>> {
        let out = self.model.forward(input, false)?;
        let target = resize_target(gt, &self.cfg.model);
        loss(self.cfg.loss, &out.logits, &target, &self.cfg.focal)
    }

    /// One optimizer update on a batch; returns the mean loss.
    pub fn train_step(&mut self, batch: &[(ModelInput<T>, ClassMap)]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Dataset("empty batch".into()));
        }
        let params = self.model.parameters();
        let step = self.step;
        let per_sample: Vec<Result<(f64, Vec<Option<Vec<T>>>)>> = batch
            .par_iter()
            .map(|(input, gt)| {
                let l = self.sample_loss(input, gt).map_err(|e| match e {
                    Error::NonFinite(op) => Error::NonFiniteLoss {
                        step,
                        detail: format!("non-finite output of {op}"),
                    },
                    other => other,
                })?;
                let lv = l.item().as_f64();
                check_finite(step, "loss", lv)?;
                let grads = l.grad_map()?;
                Ok((lv, params.iter().map(|p| grads.get(p).map(|g| g.to_vec())).collect()))
            })
            .collect();
        let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
        let mut total = 0.0;
        let mut sum: Vec<Option<Vec<T>>> = vec![None; params.len()];
        for r in per_sample {
            let (lv, grads) = r?;
            total += lv;
            for (acc, g) in sum.iter_mut().zip(grads) {
                let Some(g) = g else { continue };
                match acc {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, &b)| *a += b * scale),
                    None => *acc = Some(g.iter().map(|&v| v * scale).collect()),
                }
            }
        }
        for g in sum.iter().flatten() {
            let norm: f64 = g.iter().map(|v| v.as_f64() * v.as_f64()).sum();
            check_finite(step, "gradient norm", norm)?;
        }
        let lr = self.cfg.schedule().lr(step);
        self.opt.step_with(&params, &sum, lr)?;
        self.step += 1;
        Ok(total / batch.len() as f64)
    }

    /// Runs until `max_steps` or the mean-IoU stop rule. `log` sees every
    /// step and evaluation as it happens.
    pub fn fit(
        &mut self,
        samples: &[DatasetSample],
        mut log: impl FnMut(&StepRecord, Option<&EvalRecord>),
    ) -> Result<TrainHistory> {
        if samples.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let cached = if self.cfg.augment == AugmentConfig::none() {
            Some(prepare_inputs::<T>(samples, &self.cfg.model, self.cfg.inputs)?)
        } else {
            None
        };
        let mut history = TrainHistory::default();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7EA1);
        let mut order = Vec::new();
        let mut epoch = 0u64;
        while self.step < self.cfg.max_steps {
            let mut idx = Vec::with_capacity(self.cfg.batch_size);
            while idx.len() < self.cfg.batch_size.min(samples.len()) {
                if order.is_empty() {
                    order = permutation(samples.len(), &mut rng);
                    epoch += 1;
                }
                idx.push(order.pop().expect("non-empty order"));
            }
            let batch: Vec<(ModelInput<T>, ClassMap)> = match &cached {
                Some(c) => idx.iter().map(|&i| c[i].clone()).collect(),
                None => idx
                    .iter()
                    .map(|&i| {
                        let s = augment(&samples[i], &self.cfg.augment, epoch)?;
                        Ok((to_model_input(&s, &self.cfg.model, self.cfg.inputs)?, s.gt))
                    })
                    .collect::<Result<_>>()?,
            };
            let lr = self.cfg.schedule().lr(self.step);
            let loss = self.train_step(&batch)?;
            let rec = StepRecord {
                step: self.step,
                loss,
                lr,
            };
            let eval = if self.cfg.eval_every > 0
                && (self.step % self.cfg.eval_every == 0 || self.step == self.cfg.max_steps)
            {
                let inputs = match &cached {
                    Some(c) => c.clone(),
                    None => prepare_inputs(samples, &self.cfg.model, self.cfg.inputs)?,
                };
                Some(EvalRecord {
                    step: self.step,
                    iou: evaluate_inputs(&self.model, &inputs)?,
                })
            } else {
                None
            };
            log(&rec, eval.as_ref());
            history.steps.push(rec);
            if let Some(e) = eval {
                let stop = self.cfg.stop_at_miou.is_some_and(|t| e.iou.mean >= t);
                history.evals.push(e);
                if stop {
                    break;
                }
            }
        }
        Ok(history)
    }
}

/// Ground truth at the model's output resolution.
pub fn resize_target(gt: &ClassMap, model: &ModelConfig) -> ClassMap {
    if (gt.h, gt.w) == (model.map_h, model.map_w) {
        gt.clone()
    } else {
        gt.resized(model.map_h, model.map_w)
    }
}

pub fn prepare_inputs<T: Scalar>(
    samples: &[DatasetSample],
    model: &ModelConfig,
    opts: InputOptions,
) -> Result<Vec<(ModelInput<T>, ClassMap)>> {
    samples
        .par_iter()
        .map(|s| Ok((to_model_input(s, model, opts)?, s.gt.clone())))
        .collect()
}

/// Predicted class map of one input.
pub fn predict<T: Scalar>(model: &FusionModel<T>, input: &ModelInput<T>) -> Result<ClassMap> {
    let _guard = no_grad();
    predict_classes(&model.forward(input, false)?.logits)
}

pub fn evaluate_inputs<T: Scalar>(model: &FusionModel<T>, inputs: &[(ModelInput<T>, ClassMap)]) -> Result<IouReport> {
    let preds: Vec<Result<ClassMap>> = inputs.par_iter().map(|(x, _)| predict(model, x)).collect();
    let mut acc = IouAccumulator::new(model.cfg.n_classes);
    for (p, (_, gt)) in preds.into_iter().zip(inputs) {
        acc.add(&p?, &resize_target(gt, &model.cfg))?;
    }
    Ok(acc.report())
}

pub fn evaluate<T: Scalar>(model: &FusionModel<T>, samples: &[DatasetSample], opts: InputOptions) -> Result<IouReport> {
    evaluate_inputs(model, &prepare_inputs(samples, &model.cfg, opts)?)
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: usize,
    pub dtype: DType,
    pub config: TrainConfig,
    pub params: Vec<ParamEntry>,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

fn param_file(kind: &str, name: &str) -> String {
    format!("{kind}.{name}.ten")
}

/// Writes parameters and optimizer moments under `dir`.
pub fn save_checkpoint<T: Scalar>(dir: &Path, trainer: &Trainer<T>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::new();
    for ((name, t), state) in trainer.model.store.iter().zip(&trainer.opt.states) {
        let shape = t.shape().to_vec();
        TenFile::from_scalars(shape.clone(), &t.to_vec())?.write(&dir.join(param_file("param", name)))?;
        TenFile::from_scalars(shape.clone(), &state.m)?.write(&dir.join(param_file("adam_m", name)))?;
        TenFile::from_scalars(shape.clone(), &state.v)?.write(&dir.join(param_file("adam_v", name)))?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape,
        });
    }
    let manifest = CheckpointManifest {
        step: trainer.step,
        dtype: T::DTYPE,
        config: trainer.cfg.clone(),
        params,
        optimizer_step: trainer.opt.step,
    };
    fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn read_values<T: Scalar>(dir: &Path, kind: &str, entry: &ParamEntry) -> Result<Vec<T>> {
    let f = TenFile::read(&dir.join(param_file(kind, &entry.name)))?;
    if f.dims != entry.shape {
        return Err(Error::shape(
            "load checkpoint",
            format!(
                "{kind} {}: file dims {:?}, manifest {:?}",
                entry.name, f.dims, entry.shape
            ),
        ));
    }
    f.to_scalars()
}

/// Restores a trainer. With `model_override` the stored parameters must
/// still match the overriding architecture.
pub fn load_checkpoint<T: Scalar>(dir: &Path, model_override: Option<&ModelConfig>) -> Result<Trainer<T>> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut cfg = manifest.config.clone();
    if let Some(m) = model_override {
        cfg.model = m.clone();
    }
    let mut trainer = Trainer::<T>::new(cfg)?;
    let mut values = Vec::with_capacity(manifest.params.len());
    let mut states = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        values.push((
            entry.name.clone(),
            entry.shape.clone(),
            read_values::<T>(dir, "param", entry)?,
        ));
        states.push((
            entry.name.clone(),
            AdamState {
                m: read_values(dir, "adam_m", entry)?,
                v: read_values(dir, "adam_v", entry)?,
            },
        ));
    }
    trainer.model.store.load_from(&values)?;
    let order: Vec<&str> = trainer.model.store.iter().map(|(n, _)| n).collect();
    trainer.opt.states = order
        .iter()
        .map(|name| {
            states
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s.clone())
                .ok_or_else(|| Error::shape("load checkpoint", format!("no optimizer state for {name}")))
        })
        .collect::<Result<_>>()?;
    trainer.opt.step = manifest.optimizer_step;
    trainer.step = manifest.step;
    Ok(trainer)
}
