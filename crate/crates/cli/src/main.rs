use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevfuse::config::{config_hash, RunConfig};
use bevfuse::data::io::{read_index, sample_dirs};
use bevfuse::data::rig::SensorRig;
use bevfuse::data::sample::{to_model_input, InputOptions, SynthConfig};
use bevfuse::data::{generate_dataset, read_dataset, read_sample, write_dataset, TenFile, TenPayload};
use bevfuse::diff::no_grad;
use bevfuse::fusion::extract_saliency;
use bevfuse::head::CLASS_NAMES;
use bevfuse::model::{ModelConfig, ModelInput};
use bevfuse::raster::{parse_xyz, rasterize, RasterConfig};
use bevfuse::train::{evaluate_inputs, load_checkpoint, read_checkpoint_manifest, save_checkpoint, Trainer};
use bevfuse::{DType, Error, Scalar};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(
    name = "bevfuse",
    version,
    about = "Camera and lidar fusion into bird's-eye-view maps"
)]
struct Cli {
    /// Print only machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic marine dataset.
    Synth(SynthArgs),
    /// Rasterize an `x y z` text point cloud into a pseudo-image.
    Raster(RasterArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (per-class and mean IoU).
    Eval(EvalArgs),
    /// Export attention heat maps for a probe region.
    Saliency(SaliencyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, default_value_t = 3)]
    t: usize,
    #[arg(long, default_value_t = 5.0)]
    dt: f64,
    #[arg(long, default_value_t = 4)]
    views_rgb: usize,
    #[arg(long, default_value_t = 2)]
    views_lwir: usize,
    #[arg(long, default_value_t = 2)]
    lidars: usize,
    /// Standard deviation of recorded-extrinsic noise, degrees.
    #[arg(long, default_value_t = 0.0)]
    miscal_deg: f64,
    /// Render at the full-size model resolution.
    #[arg(long)]
    paper_dims: bool,
}

#[derive(Args, Debug)]
struct RasterArgs {
    /// Text file with one `x y z` point per line.
    #[arg(long)]
    input: PathBuf,
    /// Output `.ten` file holding `[5, H, W]` f64 channels.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3.0)]
    cell_size: f64,
    #[arg(long, default_value_t = 200)]
    grid_h: usize,
    #[arg(long, default_value_t = 200)]
    grid_w: usize,
    /// Optional PNG of the occupancy mask.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` config; `BEVFUSE_*` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory (overrides `checkpoint_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paper_dims: bool,
    /// Train in double precision.
    #[arg(long)]
    f64: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Config to compare against the checkpoint's; a differing hash warns.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_lidar: bool,
    #[arg(long)]
    no_lwir: bool,
    /// Number of instants fed to the model (1 or the trained t).
    #[arg(long)]
    t: Option<usize>,
}

#[derive(Args, Debug)]
struct SaliencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample id or index within the dataset.
    #[arg(long)]
    sample: String,
    /// Query rectangle `r0,c0,r1,c1`, end-exclusive.
    #[arg(long)]
    probe: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

struct Out {
    json: bool,
}

impl Out {
    fn info(&self, msg: impl AsRef<str>) {
        if self.json {
            eprintln!("{}", msg.as_ref());
        } else {
            println!("{}", msg.as_ref());
        }
    }

    fn result(&self, v: &Value, human: impl FnOnce() -> String) {
        if self.json {
            println!("{v}");
        } else {
            println!("{}", human());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let out = Out { json: cli.json };
    let res = match cli.cmd {
        Cmd::Synth(a) => synth(&out, a),
        Cmd::Raster(a) => raster(&out, a),
        Cmd::Train(a) => train(&out, a),
        Cmd::Eval(a) => eval(&out, a),
        Cmd::Saliency(a) => saliency(&out, a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn synth(out: &Out, a: SynthArgs) -> CliResult<()> {
    if a.views_rgb == 0 {
        return Err(CliError::Usage("at least one RGB view is required".into()));
    }
    let mut model = if a.paper_dims {
        ModelConfig::paper()
    } else {
        ModelConfig::toy()
    };
    model.t = a.t;
    let mut cfg = SynthConfig::for_model(&model, a.samples, a.seed);
    cfg.scene.dt = a.dt;
    cfg.rig = SensorRig::with_counts(a.views_rgb, a.views_lwir, a.lidars, model.image_h, model.image_w);
    cfg.miscalibration_deg = a.miscal_deg;
    let samples = generate_dataset(&cfg)?;
    write_dataset(&a.out, &samples, Some(&cfg))?;
    let v = json!({"out": a.out, "samples": samples.len(), "seed": a.seed});
    out.result(&v, || format!("wrote {} samples to {}", samples.len(), a.out.display()));
    Ok(())
}

fn raster(out: &Out, a: RasterArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.input)?;
    let pcd = parse_xyz(&text, "cli", 0.0)?;
    let cfg = RasterConfig::centered(a.grid_h, a.grid_w, a.cell_size);
    let img = rasterize(&pcd, &cfg)?;
    let t = img.to_tensor::<f64>(1.0)?;
    TenFile::new(t.shape().to_vec(), TenPayload::F64(t.to_vec()))?.write(&a.out)?;
    if let Some(png) = &a.png {
        let data: Vec<u8> = img.occupancy.iter().map(|&o| o * 255).collect();
        write_png(png, a.grid_w, a.grid_h, data)?;
    }
    let occupied = img.occupancy.iter().filter(|&&o| o > 0).count();
    let v = json!({"points": pcd.len(), "occupied_cells": occupied, "dropped": img.dropped, "out": a.out});
    out.result(&v, || {
        format!(
            "{} points, {occupied} occupied cells, {} outside the grid",
            pcd.len(),
            img.dropped
        )
    });
    Ok(())
}

fn write_png(path: &Path, w: usize, h: usize, data: Vec<u8>) -> CliResult<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| CliError::Runtime(Error::Dataset("image buffer size mismatch".into())))?;
    img.save(path)
        .map_err(|e| CliError::Runtime(Error::Dataset(format!("{}: {e}", path.display()))))
}

fn train(out: &Out, a: TrainArgs) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    if a.paper_dims {
        cfg.set("paper_dims", "true")?;
    }
    if let Some(p) = &a.config {
        cfg.apply_text(&fs::read_to_string(p)?)
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    cfg.apply_env(std::env::vars())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = a.out {
        cfg.checkpoint_dir = Some(o);
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if a.f64 {
        train_as::<f64>(out, &a.data, cfg)
    } else {
        train_as::<f32>(out, &a.data, cfg)
    }
}

fn train_as<T: Scalar>(out: &Out, data: &Path, cfg: RunConfig) -> CliResult<()> {
    let samples = read_dataset(data)?;
    let hash = config_hash(&cfg.train);
    let mut trainer = Trainer::<T>::new(cfg.train.clone())?;
    out.info(format!(
        "training {} parameters on {} samples (config {})",
        trainer.model.store.num_scalars(),
        samples.len(),
        &hash[..12]
    ));
    let history = trainer.fit(&samples, |s, e| {
        if s.step % 10 == 0 || e.is_some() {
            eprintln!("step {:>5}  loss {:.6}  lr {:.2e}", s.step, s.loss, s.lr);
        }
        if let Some(e) = e {
            eprintln!("step {:>5}  mean IoU {:.4}", e.step, e.iou.mean);
        }
    })?;
    let ckpt = cfg
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("checkpoint"));
    save_checkpoint(&ckpt, &trainer)?;
    let report = json!({
        "config_hash": hash,
        "checkpoint": ckpt,
        "steps": trainer.step,
        "final_loss": history.final_loss(),
        "best_mean_iou": history.best_miou(),
        "history": history,
    });
    let report_path = cfg.report_path.clone().unwrap_or_else(|| ckpt.join("report.json"));
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    out.result(&report, || {
        format!(
            "trained {} steps, final loss {:.6}; checkpoint in {}",
            trainer.step,
            history.final_loss().unwrap_or(f64::NAN),
            ckpt.display()
        )
    });
    Ok(())
}

fn restrict_instants<T: Scalar>(mut input: ModelInput<T>, t: usize) -> ModelInput<T> {
    let n = input.instants.len();
    if t < n {
        input.instants.drain(..n - t);
    }
    input
}

fn eval(out: &Out, a: EvalArgs) -> CliResult<()> {
    let manifest = read_checkpoint_manifest(&a.checkpoint)?;
    match manifest.dtype {
        DType::F64 => eval_as::<f64>(out, a),
        _ => eval_as::<f32>(out, a),
    }
}

fn eval_as<T: Scalar>(out: &Out, a: EvalArgs) -> CliResult<()> {
    let trainer = load_checkpoint::<T>(&a.checkpoint, None)?;
    let hash = config_hash(&trainer.cfg);
    if let Some(p) = &a.config {
        let mut other = RunConfig::default();
        other
            .apply_text(&fs::read_to_string(p)?)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if config_hash(&other.train) != hash {
            eprintln!("warning: config hash differs from the checkpoint's ({})", &hash[..12]);
        }
    }
    let t = a.t.unwrap_or(trainer.cfg.model.t);
    if t != 1 && t != trainer.cfg.model.t {
        return Err(CliError::Usage(format!(
            "--t must be 1 or {}, got {t}",
            trainer.cfg.model.t
        )));
    }
    let opts = InputOptions {
        rgb: trainer.cfg.inputs.rgb,
        lwir: trainer.cfg.inputs.lwir && !a.no_lwir,
        lidar: trainer.cfg.inputs.lidar && !a.no_lidar,
    };
    let samples = read_dataset(&a.data)?;
    let inputs = samples
        .iter()
        .map(|s| {
            let x = to_model_input::<T>(s, &trainer.cfg.model, opts)?;
            Ok((restrict_instants(x, t), s.gt.clone()))
        })
        .collect::<bevfuse::Result<Vec<_>>>()?;
    let iou = evaluate_inputs(&trainer.model, &inputs)?;
    let per_class: serde_json::Map<String, Value> = CLASS_NAMES
        .iter()
        .zip(&iou.per_class)
        .map(|(n, v)| (n.to_string(), json!(v)))
        .collect();
    let v = json!({
        "config_hash": hash,
        "checkpoint": a.checkpoint,
        "samples": samples.len(),
        "t": t,
        "no_lidar": a.no_lidar,
        "no_lwir": a.no_lwir,
        "per_class_iou": per_class,
        "mean_iou": iou.mean,
    });
    out.result(&v, || {
        let mut s = String::new();
        for (n, c) in CLASS_NAMES.iter().zip(&iou.per_class) {
            let c = c.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            s.push_str(&format!("{n:>10}  {c}\n"));
        }
        s.push_str(&format!("{:>10}  {:.4}", "mean", iou.mean));
        s
    });
    Ok(())
}

fn parse_probe(s: &str) -> CliResult<[usize; 4]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("probe {s:?} must be r0,c0,r1,c1")))?;
    v.try_into()
        .map_err(|_| CliError::Usage(format!("probe {s:?} must have four values")))
}

fn saliency(out: &Out, a: SaliencyArgs) -> CliResult<()> {
    let manifest = read_checkpoint_manifest(&a.checkpoint)?;
    match manifest.dtype {
        DType::F64 => saliency_as::<f64>(out, a),
        _ => saliency_as::<f32>(out, a),
    }
}

fn saliency_as<T: Scalar>(out: &Out, a: SaliencyArgs) -> CliResult<()> {
    let [r0, c0, r1, c1] = parse_probe(&a.probe)?;
    let trainer = load_checkpoint::<T>(&a.checkpoint, None)?;
    let m = &trainer.cfg.model;
    if r0 >= r1 || c0 >= c1 || r1 > m.h_q || c1 > m.w_q {
        return Err(CliError::Runtime(Error::IndexOutOfRange {
            what: "probe rectangle",
            index: r1.max(c1),
            len: m.h_q.min(m.w_q),
        }));
    }
    let probe: Vec<usize> = (r0..r1).flat_map(|r| (c0..c1).map(move |c| r * m.w_q + c)).collect();
    let index = read_index(&a.data)?;
    let dir = match a.sample.parse::<usize>() {
        Ok(i) => sample_dirs(&a.data)?.get(i).cloned().ok_or(Error::IndexOutOfRange {
            what: "sample",
            index: i,
            len: index.samples.len(),
        })?,
        Err(_) => a.data.join(&a.sample),
    };
    let sample = read_sample(&dir)?;
    let input = to_model_input::<T>(&sample, m, trainer.cfg.inputs)?;
    let fwd = {
        let _g = no_grad();
        trainer.model.forward(&input, true)?
    };
    fs::create_dir_all(&a.out)?;
    let now = input.instants.last().expect("instants");
    // The current instant always carries the last time index.
    let tau = m.t - 1;
    let mut written = Vec::new();
    for rec in &fwd.records {
        for view in &now.views {
            let [_, h, w] = *view.image.shape() else { continue };
            let map = extract_saliency(rec, &probe, &view.view_id, tau, h, w)?;
            let data: Vec<u8> = map
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
                .collect();
            let path = a.out.join(format!("{}_{}.png", view.view_id, rec.scale));
            write_png(&path, w, h, data)?;
            written.push(path);
        }
    }
    let v = json!({"sample": sample.sample_id, "probe": [r0, c0, r1, c1], "files": written});
    out.result(&v, || {
        format!("wrote {} heat maps to {}", written.len(), a.out.display())
    });
    Ok(())
}
