//! Command-line front end: dataset synthesis, training, inference, grids
//! and evaluation reports.

pub mod config;
pub mod grid;
pub mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use latent_relight::data::{load_multi_illum, load_scenes, JudgmentSet, LoadedScene};
use latent_relight::eval::{default_delta_grid, eval_relight, tune_delta, whdr, LightnessMap, WhdrResult};
use latent_relight::model::interpolate_extrinsics;
use latent_relight::train::{fit, load_checkpoint, Checkpoint, FitOptions, FINAL_CHECKPOINT};
use latent_relight::{data, Error, ImageBuffer, Weights};
use serde::Serialize;

use crate::config::{FileConfig, Preset};
use crate::manifest::{sidecar_path, RunManifest, DIR_MANIFEST};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "latent-relight", version, about = "Relighting and albedo estimation with latent intrinsics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural multi-illumination dataset.
    SynthData(SynthArgs),
    /// Train a model on a multi-illumination dataset.
    Train(TrainArgs),
    /// Relight an image with the lighting of a reference image.
    Relight(RelightArgs),
    /// Estimate albedo by decoding with the lighting pathway disabled.
    Albedo(AlbedoArgs),
    /// Blend two reference lightings and render a frame strip.
    Interpolate(InterpolateArgs),
    /// Score relighting on a dataset under the fixed-reference protocol.
    EvalRelight(EvalRelightArgs),
    /// Score albedo estimates against pairwise lightness judgments.
    EvalWhdr(EvalWhdrArgs),
    /// Print a checkpoint's manifest as JSON.
    InspectCheckpoint(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub n_lights: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub n_albedo_regions: Option<usize>,
    #[arg(long)]
    pub ambient: Option<f64>,
    #[arg(long)]
    pub color_jitter: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Stop after this many total steps (a checkpoint is written).
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long, conflicts_with_all = ["config", "preset", "seed", "epochs", "batch_size", "learning_rate", "eval_every"])]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RelightArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AlbedoArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub ref_a: PathBuf,
    #[arg(long)]
    pub ref_b: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub steps: u32,
    /// Grid PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each frame as `frame_XX.png` here.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalRelightArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 12)]
    pub n_refs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalWhdrArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory of `<id>.png` photos with `<id>.json` judgment files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "tune_data")]
    pub delta: Option<f64>,
    /// Split used to pick δ from the default grid.
    #[arg(long)]
    pub tune_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Relight(a) => relight(a),
        Command::Albedo(a) => albedo(a),
        Command::Interpolate(a) => interpolate(a),
        Command::EvalRelight(a) => eval_relight_cmd(a),
        Command::EvalWhdr(a) => eval_whdr_cmd(a),
        Command::InspectCheckpoint(a) => inspect(a),
    }
}

fn synth_data(a: SynthArgs) -> Result<(), CliError> {
    let file = FileConfig::load(a.config.as_deref())?;
    let mut spec = file.synth()?;
    spec.seed = file.seed(a.seed)?;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { spec.$f = v; })* };
    }
    set!(n_scenes, n_lights, image_size, n_albedo_regions, ambient, color_jitter);
    spec.validate()?;
    let inputs: Vec<&Path> = a.config.as_deref().into_iter().collect();
    RunManifest::new("synth-data", &spec, &inputs, &[&a.out], Some(spec.seed)).write(&a.out.join(DIR_MANIFEST))?;
    let records = data::generate_synthetic_dataset(&spec, &a.out)?;
    log::info!("wrote {} scenes x {} lightings to {}", records.len(), spec.n_lights, a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    model: &'a latent_relight::ModelConfig,
    train: &'a latent_relight::train::TrainConfig,
    max_steps: Option<u64>,
    resume: Option<&'a Path>,
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let (model, mut cfg, resume) = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            (ckpt.model_config().clone(), ckpt.train_config.clone(), Some(ckpt))
        }
        None => {
            let file = FileConfig::load(a.config.as_deref())?;
            let preset = a.preset.or(file.preset).unwrap_or_default();
            let mut model = file.model(preset)?;
            let mut cfg = file.train(preset)?;
            let seed = file.seed(a.seed)?;
            model.seed = seed;
            cfg.seed = seed;
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
            }
            set!(epochs, batch_size, learning_rate, eval_every);
            (model, cfg, None)
        }
    };
    // Checkpoints record the run directory; a resumed run may live elsewhere.
    cfg.out_dir = Some(a.out.clone());
    let resume = resume.map(|mut c| {
        c.train_config.out_dir = cfg.out_dir.clone();
        c
    });
    model.validate()?;
    cfg.validate()?;
    let mut inputs: Vec<&Path> = vec![&a.data];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.resume.as_deref());
    let settings = TrainSettings { model: &model, train: &cfg, max_steps: a.max_steps, resume: a.resume.as_deref() };
    RunManifest::new("train", &settings, &inputs, &[&a.out], Some(cfg.seed)).write(&a.out.join(DIR_MANIFEST))?;

    let records = load_multi_illum(&a.data)?;
    let scenes = load_scenes::<f32>(&records)?;
    log::info!("training on {} scenes ({} images)", scenes.len(), scenes.iter().map(|s| s.images.len()).sum::<usize>());
    let ckpt = fit(&model, &cfg, &scenes, FitOptions { resume, stop_after: a.max_steps, on_step: None })?;
    log::info!("finished at step {}; checkpoint in {}", ckpt.step, a.out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn load_weights(path: &Path) -> Result<Weights<f32>, CliError> {
    Ok(load_checkpoint(path)?.weights)
}

/// Loads a PNG and resamples it to the model resolution if needed.
fn load_input(path: &Path, resolution: usize) -> Result<ImageBuffer<f32>, CliError> {
    let img = ImageBuffer::load_png(path)?;
    if img.height() == resolution && img.width() == resolution {
        return Ok(img);
    }
    log::warn!(
        "{}: resizing {}x{} to {resolution}x{resolution}",
        path.display(),
        img.height(),
        img.width()
    );
    Ok(img.resize_bilinear(resolution, resolution))
}

fn relight(a: RelightArgs) -> Result<(), CliError> {
    RunManifest::new("relight", serde_json::json!({}), &[&a.ckpt, &a.input, &a.reference], &[&a.out], None)
        .write(&sidecar_path(&a.out))?;
    let w = load_weights(&a.ckpt)?;
    let res = w.config().base_resolution;
    let input = load_input(&a.input, res)?;
    let reference = load_input(&a.reference, res)?;
    w.relight(&input, &reference)?.save_png(&a.out)?;
    Ok(())
}

fn albedo(a: AlbedoArgs) -> Result<(), CliError> {
    RunManifest::new("albedo", serde_json::json!({ "alpha": 0.0 }), &[&a.ckpt, &a.input], &[&a.out], None)
        .write(&sidecar_path(&a.out))?;
    let w = load_weights(&a.ckpt)?;
    let input = load_input(&a.input, w.config().base_resolution)?;
    w.estimate_albedo(&input)?.save_png(&a.out)?;
    Ok(())
}

/// Blend parameters `0, 1/(n−1), …, 1`.
pub fn interpolation_ts(steps: u32) -> Vec<f32> {
    if steps <= 1 {
        return vec![0.0];
    }
    (0..steps).map(|i| if i + 1 == steps { 1.0 } else { i as f32 / (steps - 1) as f32 }).collect()
}

fn interpolate(a: InterpolateArgs) -> Result<(), CliError> {
    let mut outputs: Vec<&Path> = vec![&a.out];
    outputs.extend(a.frames_dir.as_deref());
    RunManifest::new(
        "interpolate",
        serde_json::json!({ "steps": a.steps }),
        &[&a.ckpt, &a.input, &a.ref_a, &a.ref_b],
        &outputs,
        None,
    )
    .write(&sidecar_path(&a.out))?;
    let w = load_weights(&a.ckpt)?;
    let res = w.config().base_resolution;
    let (intrinsics, _) = w.encode(&load_input(&a.input, res)?)?;
    let (_, code_a) = w.encode(&load_input(&a.ref_a, res)?)?;
    let (_, code_b) = w.encode(&load_input(&a.ref_b, res)?)?;
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    for t in interpolation_ts(a.steps) {
        let code = interpolate_extrinsics(&code_a, &code_b, t)?;
        frames.push(w.decode(&intrinsics, &code, None)?);
        labels.push(format!("t={t:.2}"));
    }
    if let Some(dir) = &a.frames_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for (i, f) in frames.iter().enumerate() {
            f.save_png(dir.join(format!("frame_{i:02}.png")))?;
        }
    }
    grid::render_grid(&frames, &labels, &a.out)?;
    Ok(())
}

fn load_eval_scenes(root: &Path, resolution: usize) -> Result<Vec<LoadedScene<f32>>, CliError> {
    let scenes = load_scenes::<f32>(&load_multi_illum(root)?)?;
    let resized = scenes
        .iter()
        .map(|s| {
            let (h, w) = s.images.values().next().map(|i| (i.height(), i.width())).unwrap_or((resolution, resolution));
            if (h, w) != (resolution, resolution) {
                log::warn!("scene {}: resizing {h}x{w} to {resolution}x{resolution}", s.scene_id);
            }
            s.resized(resolution)
        })
        .collect();
    Ok(resized)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(format!("report serialization: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn eval_relight_cmd(a: EvalRelightArgs) -> Result<(), CliError> {
    let seed = FileConfig::default().seed(a.seed)?;
    RunManifest::new("eval-relight", serde_json::json!({ "n_refs": a.n_refs }), &[&a.ckpt, &a.data], &[&a.out], Some(seed))
        .write(&sidecar_path(&a.out))?;
    let w = load_weights(&a.ckpt)?;
    let scenes = load_eval_scenes(&a.data, w.config().base_resolution)?;
    let report = eval_relight(&w, &scenes, a.n_refs, seed)?;
    if !report.skipped.is_empty() {
        log::warn!("{} pairs skipped: reference lighting missing from the input scene", report.skipped.len());
    }
    log::info!(
        "{} pairs: RMSE {:.4} raw / {:.4} corrected, SSIM {:.4} raw / {:.4} corrected",
        report.rows.len(),
        report.mean_raw_rmse,
        report.mean_corrected_rmse,
        report.mean_raw_ssim,
        report.mean_corrected_ssim
    );
    write_json(&a.out, &report)
}

#[derive(Serialize)]
struct WhdrImage {
    id: String,
    #[serde(flatten)]
    result: WhdrResult,
}

#[derive(Serialize)]
struct WhdrReport {
    delta: f64,
    tuned: bool,
    mean_whdr: f64,
    images: Vec<WhdrImage>,
}

/// `(id, lightness of the estimated albedo, judgments)` for every
/// `<id>.png` with a matching `<id>.json`.
fn whdr_inputs(w: &Weights<f32>, dir: &Path) -> Result<Vec<(String, LightnessMap, JudgmentSet)>, CliError> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png") && p.with_extension("json").is_file())
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(CliError::Usage(format!("{}: no <id>.png / <id>.json pairs", dir.display())));
    }
    let res = w.config().base_resolution;
    ids.into_iter()
        .map(|id| {
            let photo = load_input(&dir.join(format!("{id}.png")), res)?;
            let judgments = data::load_iiw_judgments(dir.join(format!("{id}.json")))?;
            let map = LightnessMap::from_image(&w.estimate_albedo(&photo)?);
            Ok((id, map, judgments))
        })
        .collect()
}

fn eval_whdr_cmd(a: EvalWhdrArgs) -> Result<(), CliError> {
    let mut inputs: Vec<&Path> = vec![&a.ckpt, &a.data];
    inputs.extend(a.tune_data.as_deref());
    let settings = serde_json::json!({ "delta": a.delta, "grid": a.tune_data.as_ref().map(|_| default_delta_grid()) });
    RunManifest::new("eval-whdr", settings, &inputs, &[&a.out], None).write(&sidecar_path(&a.out))?;
    let w = load_weights(&a.ckpt)?;
    let delta = match &a.tune_data {
        Some(dir) => {
            let split = whdr_inputs(&w, dir)?;
            let (maps, sets): (Vec<_>, Vec<_>) = split.into_iter().map(|(_, m, j)| (m, j)).unzip();
            let d = tune_delta(&maps, &sets, &default_delta_grid())?;
            log::info!("tuned delta = {d}");
            d
        }
        None => a.delta.unwrap_or(0.1),
    };
    let mut images = Vec::new();
    for (id, map, set) in whdr_inputs(&w, &a.data)? {
        images.push(WhdrImage { id, result: whdr(&map, &set, delta)? });
    }
    let mean_whdr = images.iter().map(|i| i.result.whdr).sum::<f64>() / images.len() as f64;
    log::info!("mean WHDR {mean_whdr:.4} over {} images at delta {delta}", images.len());
    write_json(&a.out, &WhdrReport { delta, tuned: a.tune_data.is_some(), mean_whdr, images })
}

#[derive(Serialize)]
struct ArraySummary {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize)]
struct CheckpointSummary<'a> {
    manifest: RunManifest,
    format_version: u32,
    step: u64,
    model_config: &'a latent_relight::ModelConfig,
    train_config: &'a latent_relight::train::TrainConfig,
    optimizer_step: u64,
    parameter_count: usize,
    arrays: Vec<ArraySummary>,
}

fn inspect(a: InspectArgs) -> Result<(), CliError> {
    let ckpt: Checkpoint = load_checkpoint(&a.ckpt)?;
    let summary = CheckpointSummary {
        manifest: RunManifest::new("inspect-checkpoint", serde_json::json!({}), &[&a.ckpt], &[], None),
        format_version: latent_relight::train::CHECKPOINT_FORMAT_VERSION,
        step: ckpt.step,
        model_config: ckpt.model_config(),
        train_config: &ckpt.train_config,
        optimizer_step: ckpt.optimizer.step,
        parameter_count: ckpt.weights.param_count(),
        arrays: ckpt
            .weights
            .params()
            .iter()
            .map(|(name, t)| ArraySummary { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}
