//! Optimization loop: AdamW steps with the denoising warm-up, versioned
//! checkpoints and bitwise-deterministic resumption.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{apply_noise, paired_crop_resize, sample_training_pair, LoadedScene, NoiseSchedule, PairSample};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, ImageBuffer};
use crate::losses::{total_loss_graph, BatchVars, LossBreakdown, LossWeights, UniformityTarget};
use crate::model::{decode_graph, encode_graph, init_model, ModelConfig, Weights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LRELIGHT";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub noise: NoiseSchedule,
    pub seed: u64,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub eval_every: u64,
    pub out_dir: Option<PathBuf>,
    pub crop_ratio_min: f64,
    pub crop_ratio_max: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            epochs: 1000,
            learning_rate: 2e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            noise: NoiseSchedule::default(),
            seed: 0,
            eval_every: 1000,
            out_dir: None,
            crop_ratio_min: 0.2,
            crop_ratio_max: 1.0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings used with [`ModelConfig::tiny`].
    pub fn tiny() -> Self {
        Self { batch_size: 16, epochs: 125, eval_every: 500, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be finite and non-negative", self.weight_decay)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::Config("Adam constants need beta in [0, 1) and eps > 0".into()));
        }
        if !(self.crop_ratio_min > 0.0 && self.crop_ratio_min <= self.crop_ratio_max && self.crop_ratio_max <= 1.0) {
            return Err(Error::Config("crop ratios need 0 < min <= max <= 1".into()));
        }
        self.noise.validate()?;
        self.loss.validate()
    }

    pub fn steps_per_epoch(&self, n_images: usize) -> u64 {
        n_images.div_ceil(self.batch_size) as u64
    }
}

/// Adam moment estimates with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weights: &Weights<T>) -> Self {
        let zeros = || weights.params().iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. A zero learning rate leaves the
    /// weights untouched.
    pub fn update(&mut self, weights: &mut Weights<T>, grads: &BTreeMap<String, Tensor<T>>, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let bias1 = T::one() - T::lit(cfg.beta1.powf(self.step as f64));
        let bias2 = T::one() - T::lit(cfg.beta2.powf(self.step as f64));
        let lr = T::lit(cfg.learning_rate);
        let decay = T::one() - T::lit(cfg.learning_rate * cfg.weight_decay);
        let eps = T::lit(cfg.adam_eps);
        for (name, theta) in weights.params_mut().iter_mut() {
            let m = self.m.get_mut(name).ok_or_else(|| Error::CheckpointIncompatible(format!("no first moment for {name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::CheckpointIncompatible(format!("no second moment for {name}")))?;
            let Some(g) = grads.get(name) else { continue };
            for (((p, m), v), &g) in theta.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                if cfg.learning_rate != 0.0 {
                    let step = (*m / bias1) / ((*v / bias2).sqrt() + eps);
                    *p = *p * decay - lr * step;
                }
            }
        }
        Ok(())
    }
}

/// Result of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub noise_active: bool,
}

/// Samples and augments one batch of training pairs.
pub fn sample_batch<T: Scalar>(
    scenes: &[LoadedScene<T>],
    cfg: &TrainConfig,
    out_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairSample<T>>> {
    (0..cfg.batch_size)
        .map(|_| {
            let pair = sample_training_pair(scenes, rng)?;
            paired_crop_resize(&pair, cfg.crop_ratio_min, cfg.crop_ratio_max, out_size, rng)
        })
        .collect()
}

/// One AdamW step on a batch of pairs `(a, b)`: both images are encoded
/// (noised while the warm-up is active), then `a`'s and `b`'s intrinsics are
/// decoded with `b`'s extrinsics and compared to the clean `b`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Scalar>(
    weights: &mut Weights<T>,
    optimizer: &mut AdamW<T>,
    batch: &[PairSample<T>],
    cfg: &TrainConfig,
    target: &mut UniformityTarget<T>,
    epoch_fraction: f64,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    if !(0.0..=1.0).contains(&epoch_fraction) {
        return Err(Error::InvalidInput(format!("epoch fraction {epoch_fraction} outside [0, 1]")));
    }
    let res = weights.config().base_resolution;
    for p in batch {
        for img in [&p.image_a, &p.image_b] {
            if img.height() != res || img.width() != res {
                return Err(Error::Shape(format!("batch image {}x{}, model expects {res}x{res}", img.height(), img.width())));
            }
        }
    }
    let noise_active = cfg.noise.is_active(epoch_fraction);
    let mut inputs: Vec<ImageBuffer<T>> = Vec::with_capacity(2 * batch.len());
    for p in batch {
        inputs.push(apply_noise(&p.image_a, &cfg.noise, epoch_fraction, rng));
    }
    for p in batch {
        inputs.push(apply_noise(&p.image_b, &cfg.noise, epoch_fraction, rng));
    }
    let input = images_to_tensor(&inputs.iter().collect::<Vec<_>>())?;
    let clean_b = images_to_tensor(&batch.iter().map(|p| &p.image_b).collect::<Vec<_>>())?;

    let n = batch.len();
    let model_cfg = weights.config().clone();
    let mut g = Graph::new();
    let params = weights.bind(&mut g, true);
    let x = g.constant(input);
    let tgt = g.constant(clean_b);
    let enc = encode_graph(&mut g, &params, &model_cfg, x);
    let code_b = g.slice_batch(enc.code, n, n);
    let codes = g.concat_batch(&[code_b, code_b]);
    let out = decode_graph(&mut g, &params, &model_cfg, &enc.intrinsics, codes, weights.alpha());
    let relit = g.slice_batch(out, 0, n);
    let reconstruction = g.slice_batch(out, n, n);
    let intrinsics_a: Vec<_> = enc.intrinsics.iter().map(|&v| g.slice_batch(v, 0, n)).collect();
    let intrinsics_b: Vec<_> = enc.intrinsics.iter().map(|&v| g.slice_batch(v, n, n)).collect();
    let vars = BatchVars {
        relit,
        reconstruction,
        target: tgt,
        intrinsics_a: &intrinsics_a,
        intrinsics_b: &intrinsics_b,
        codes: enc.code,
    };
    let terms = total_loss_graph(&mut g, &vars, target, &cfg.loss)?;
    let breakdown = terms.evaluate(&g);
    if !breakdown.is_finite() {
        log::error!("non-finite loss at step {step}: {breakdown}");
        return Err(Error::NonFiniteLoss { step, breakdown: breakdown.to_string() });
    }
    let mut grads = g.backward(terms.total);
    let named: BTreeMap<String, Tensor<T>> =
        params.iter().filter_map(|(name, &var)| grads.take(var).map(|t| (name.clone(), t))).collect();
    optimizer.update(weights, &named, cfg)?;
    Ok(StepReport { breakdown, noise_active })
}

/// Serializable state of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal string; the position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::CheckpointIntegrity("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub step: u64,
    pub weights: Weights<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn fresh(model_config: &ModelConfig, train_config: &TrainConfig) -> Result<Self> {
        let weights = init_model::<f32>(model_config)?;
        let optimizer = AdamW::new(&weights);
        let rng = ChaCha8Rng::seed_from_u64(train_config.seed);
        Ok(Self { train_config: train_config.clone(), step: 0, optimizer, weights, rng: RngState::capture(&rng) })
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.weights.config()
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    optimizer: OptimizerHeader,
    rng: RngState,
    weights: Vec<ArrayEntry>,
    optimizer_m: Vec<ArrayEntry>,
    optimizer_v: Vec<ArrayEntry>,
    payload_len: u64,
}

fn push_arrays(arrays: &BTreeMap<String, Tensor<f32>>, payload: &mut Vec<u8>) -> Vec<ArrayEntry> {
    arrays
        .iter()
        .map(|(name, t)| {
            let offset = payload.len() as u64;
            let start = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            ArrayEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: (payload.len() - start) as u64,
                crc32: crc32fast::hash(&payload[start..]),
            }
        })
        .collect()
}

fn read_arrays(entries: &[ArrayEntry], payload: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>> {
    entries
        .iter()
        .map(|e| {
            let end = e.offset.checked_add(e.len).filter(|&end| end as usize <= payload.len()).ok_or_else(|| {
                Error::CheckpointIntegrity(format!("array {} extends past the payload", e.name))
            })?;
            let bytes = &payload[e.offset as usize..end as usize];
            if crc32fast::hash(bytes) != e.crc32 {
                return Err(Error::CheckpointIntegrity(format!("checksum mismatch in array {}", e.name)));
            }
            let numel: usize = e.shape.iter().product();
            if bytes.len() != numel * 4 {
                return Err(Error::CheckpointIntegrity(format!("array {} length disagrees with its shape", e.name)));
            }
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok((e.name.clone(), Tensor::new(&e.shape, data)?))
        })
        .collect()
}

/// Serializes a checkpoint: magic, format version (u32 LE), header length
/// (u64 LE), header CRC32 (u32 LE), JSON manifest, then little-endian f32
/// payloads.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let weights = push_arrays(ckpt.weights.params(), &mut payload);
    let optimizer_m = push_arrays(&ckpt.optimizer.m, &mut payload);
    let optimizer_v = push_arrays(&ckpt.optimizer.v, &mut payload);
    let cfg = &ckpt.train_config;
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: ckpt.model_config().clone(),
        train_config: cfg.clone(),
        step: ckpt.step,
        optimizer: OptimizerHeader { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, step: ckpt.optimizer.step },
        rng: ckpt.rng.clone(),
        weights,
        optimizer_m,
        optimizer_v,
        payload_len: payload.len() as u64,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| Error::InvalidInput(format!("checkpoint manifest: {e}")))?;
    let mut out = Vec::with_capacity(24 + header.len() + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 24 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointIntegrity("not a checkpoint file (bad magic or truncated preamble)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_crc = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes"));
    let header_end = 24u64
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::CheckpointIntegrity("truncated header".into()))? as usize;
    let header = &bytes[24..header_end];
    if crc32fast::hash(header) != header_crc {
        return Err(Error::CheckpointIntegrity("header checksum mismatch".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(header).map_err(|e| Error::CheckpointIntegrity(format!("unreadable manifest: {e}")))?;
    if manifest.format_version != version {
        return Err(Error::CheckpointVersion { found: manifest.format_version, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let payload = &bytes[header_end..];
    if payload.len() as u64 != manifest.payload_len {
        return Err(Error::CheckpointIntegrity(format!(
            "payload is {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_len
        )));
    }
    let params = read_arrays(&manifest.weights, payload)?;
    let weights = Weights::from_params(manifest.model_config, params)
        .map_err(|e| Error::CheckpointIncompatible(format!("weights do not match the model config: {e}")))?;
    let m = read_arrays(&manifest.optimizer_m, payload)?;
    let v = read_arrays(&manifest.optimizer_v, payload)?;
    for moments in [&m, &v] {
        let same = moments.len() == weights.params().len()
            && weights.params().iter().all(|(k, t)| moments.get(k).is_some_and(|x| x.shape() == t.shape()));
        if !same {
            return Err(Error::CheckpointIncompatible("optimizer state does not match the weights".into()));
        }
    }
    let train_config = manifest.train_config;
    if train_config.beta1 != manifest.optimizer.beta1
        || train_config.beta2 != manifest.optimizer.beta2
        || train_config.adam_eps != manifest.optimizer.eps
    {
        return Err(Error::CheckpointIncompatible("optimizer constants disagree with the training config".into()));
    }
    manifest.rng.restore()?;
    Ok(Checkpoint {
        train_config,
        step: manifest.step,
        weights,
        optimizer: AdamW { step: manifest.optimizer.step, m, v },
        rng: manifest.rng,
    })
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Called after every step with that step's metrics row.
pub type StepCallback = Box<dyn FnMut(&MetricsRow)>;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch_fraction: f64,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
    pub sigma_active: bool,
    pub wall_time_s: f64,
}

/// Knobs of [`fit`] that are not part of the training recipe.
#[derive(Default)]
pub struct FitOptions {
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<Checkpoint>,
    /// Stop (with a checkpoint of the current state) after this many total steps.
    pub stop_after: Option<u64>,
    /// Called after every step.
    pub on_step: Option<StepCallback>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_file_name(step: u64) -> String {
    format!("step_{step:08}.ckpt")
}

pub fn total_steps(cfg: &TrainConfig, n_images: usize) -> u64 {
    cfg.epochs as u64 * cfg.steps_per_epoch(n_images)
}

fn rewrite_metrics_prefix(path: &Path, keep_through: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let kept: String = text
        .lines()
        .filter(|line| serde_json::from_str::<MetricsRow>(line).is_ok_and(|row| row.step <= keep_through))
        .map(|line| format!("{line}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Runs the training loop over in-memory scenes. With `out_dir` set, writes
/// `metrics.jsonl`, periodic `step_*.ckpt` files and `final.ckpt`.
pub fn fit(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    scenes: &[LoadedScene<f32>],
    mut options: FitOptions,
) -> Result<Checkpoint> {
    model_config.validate()?;
    train_config.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no training scenes".into()));
    }
    let mut ckpt = match options.resume.take() {
        Some(c) => {
            if c.model_config() != model_config {
                return Err(Error::CheckpointIncompatible("resume checkpoint has a different model config".into()));
            }
            if &c.train_config != train_config {
                return Err(Error::CheckpointIncompatible("resume checkpoint has a different training config".into()));
            }
            c
        }
        None => Checkpoint::fresh(model_config, train_config)?,
    };
    let n_images: usize = scenes.iter().map(|s| s.images.len()).sum();
    let total = total_steps(train_config, n_images);
    let end = options.stop_after.map_or(total, |s| s.min(total));
    let mut rng = ckpt.rng.restore()?;
    let mut target = UniformityTarget::<f32>::new(train_config.seed ^ 0x005E_ED0F_u64, train_config.loss.lambda_distortion);

    let mut metrics = match &train_config.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            if ckpt.step > 0 {
                rewrite_metrics_prefix(&path, ckpt.step)?;
            }
            let file = fs::OpenOptions::new()
                .create(true)
                .append(ckpt.step > 0)
                .write(true)
                .truncate(ckpt.step == 0)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };
    let clock = Instant::now();
    let res = model_config.base_resolution;
    while ckpt.step < end {
        let epoch_fraction = ckpt.step as f64 / total as f64;
        let batch = sample_batch(scenes, train_config, res, &mut rng)?;
        let report = train_step(
            &mut ckpt.weights,
            &mut ckpt.optimizer,
            &batch,
            train_config,
            &mut target,
            epoch_fraction,
            &mut rng,
            ckpt.step,
        )?;
        ckpt.step += 1;
        let row = MetricsRow {
            step: ckpt.step,
            epoch_fraction,
            breakdown: report.breakdown,
            sigma_active: report.noise_active,
            wall_time_s: clock.elapsed().as_secs_f64(),
        };
        if let Some((path, w)) = metrics.as_mut() {
            let line = serde_json::to_string(&row).expect("metrics row serializes");
            writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some(cb) = options.on_step.as_mut() {
            cb(&row);
        }
        let every = train_config.eval_every;
        if every > 0 && ckpt.step % every == 0 {
            log::info!("step {}/{}: {}", ckpt.step, total, row.breakdown);
            if let (Some(dir), Some((path, w))) = (&train_config.out_dir, metrics.as_mut()) {
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                ckpt.rng = RngState::capture(&rng);
                save_checkpoint(dir.join(checkpoint_file_name(ckpt.step)), &ckpt)?;
            }
        }
    }
    ckpt.rng = RngState::capture(&rng);
    if let Some((path, mut w)) = metrics {
        w.flush().map_err(|e| Error::io(path.as_path(), e))?;
    }
    if let Some(dir) = &train_config.out_dir {
        let name = if ckpt.step == total { FINAL_CHECKPOINT.to_string() } else { checkpoint_file_name(ckpt.step) };
        save_checkpoint(dir.join(name), &ckpt)?;
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, load_scenes, SyntheticSceneSpec};

    fn micro_model() -> ModelConfig {
        ModelConfig {
            base_resolution: 16,
            blocks_per_level: vec![1, 1, 1],
            channels_per_level: vec![4, 8, 8],
            extrinsic_dim: 4,
            injection_mlp_hidden: 8,
            extrinsic_head_hidden: 8,
            ..ModelConfig::default()
        }
    }

    fn micro_train() -> TrainConfig {
        TrainConfig { batch_size: 2, epochs: 2, eval_every: 0, ..TrainConfig::default() }
    }

    fn micro_scenes() -> (tempfile::TempDir, Vec<LoadedScene<f32>>) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSceneSpec { n_scenes: 2, n_lights: 3, image_size: 16, ..Default::default() };
        let records = generate_synthetic_dataset(&spec, dir.path()).unwrap();
        (dir, load_scenes(&records).unwrap())
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (_d, scenes) = micro_scenes();
        let cfg = TrainConfig { learning_rate: 0.0, ..micro_train() };
        let mut w = init_model::<f32>(&micro_model()).unwrap();
        let before = w.clone();
        let mut opt = AdamW::new(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut target = UniformityTarget::new(0, 0.5);
        for step in 0..3 {
            let batch = sample_batch(&scenes, &cfg, 16, &mut rng).unwrap();
            train_step(&mut w, &mut opt, &batch, &cfg, &mut target, 0.1, &mut rng, step).unwrap();
        }
        assert_eq!(w, before);
        assert_ne!(opt.m, AdamW::new(&w).m);
    }

    #[test]
    fn noise_flag_follows_schedule() {
        let (_d, scenes) = micro_scenes();
        let cfg = micro_train();
        let mut w = init_model::<f32>(&micro_model()).unwrap();
        let mut opt = AdamW::new(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut target = UniformityTarget::new(0, 0.5);
        let batch = sample_batch(&scenes, &cfg, 16, &mut rng).unwrap();
        for (f, active) in [(0.0, true), (0.39, true), (0.4, false), (1.0, false)] {
            let r = train_step(&mut w, &mut opt, &batch, &cfg, &mut target, f, &mut rng, 0).unwrap();
            assert_eq!(r.noise_active, active);
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_breakdown() {
        let (_d, scenes) = micro_scenes();
        let cfg = micro_train();
        let mut w = init_model::<f32>(&micro_model()).unwrap();
        w.params_mut().get_mut("encoder.stem.bias").unwrap().data_mut()[0] = f32::NAN;
        let mut opt = AdamW::new(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut target = UniformityTarget::new(0, 0.5);
        let batch = sample_batch(&scenes, &cfg, 16, &mut rng).unwrap();
        let err = train_step(&mut w, &mut opt, &batch, &cfg, &mut target, 0.5, &mut rng, 7).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, breakdown } => {
                assert_eq!(step, 7);
                assert!(breakdown.contains("relight"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_faults() {
        let ckpt = Checkpoint::fresh(&micro_model(), &micro_train()).unwrap();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);

        let mut flipped = bytes.clone();
        flipped[8] ^= 0x01;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::CheckpointVersion { found: 0, expected: 1 })));
        for cut in [bytes.len() - 1, bytes.len() / 2, 30, 10] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::CheckpointIntegrity(_))), "cut {cut}");
        }
        let mut corrupt = bytes.clone();
        let last = corrupt.len() - 3;
        corrupt[last] ^= 0x40;
        assert!(matches!(decode_checkpoint(&corrupt), Err(Error::CheckpointIntegrity(_))));

        let names: Vec<_> = ckpt.weights.params().keys().cloned().collect();
        let expected: Vec<_> = micro_model().param_specs().into_iter().map(|s| s.name).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..13 {
            rng.random::<u32>();
        }
        let mut back = RngState::capture(&rng).restore().unwrap();
        for _ in 0..5 {
            assert_eq!(back.random::<u64>(), rng.random::<u64>());
        }
    }

    #[test]
    fn zero_epochs_returns_initialization_and_resume_is_exact() {
        let (_d, scenes) = micro_scenes();
        let model = micro_model();
        let zero = fit(&model, &TrainConfig { epochs: 0, ..micro_train() }, &scenes, FitOptions::default()).unwrap();
        assert_eq!(zero.weights, init_model::<f32>(&model).unwrap());
        assert_eq!(zero.step, 0);

        let cfg = micro_train();
        let full = fit(&model, &cfg, &scenes, FitOptions::default()).unwrap();
        assert_eq!(full.step, total_steps(&cfg, 6));
        let half = fit(&model, &cfg, &scenes, FitOptions { stop_after: Some(3), ..Default::default() }).unwrap();
        assert_eq!(half.step, 3);
        let reloaded = decode_checkpoint(&encode_checkpoint(&half).unwrap()).unwrap();
        let resumed = fit(&model, &cfg, &scenes, FitOptions { resume: Some(reloaded), ..Default::default() }).unwrap();
        assert_eq!(resumed, full);
    }

    #[test]
    fn metrics_log_has_one_row_per_step() {
        let (_d, scenes) = micro_scenes();
        let out = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { out_dir: Some(out.path().to_path_buf()), eval_every: 2, ..micro_train() };
        let ckpt = fit(&micro_model(), &cfg, &scenes, FitOptions::default()).unwrap();
        let text = fs::read_to_string(out.path().join(METRICS_FILE)).unwrap();
        let rows: Vec<MetricsRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(rows.len() as u64, ckpt.step);
        assert!(rows.iter().enumerate().all(|(i, r)| r.step == i as u64 + 1));
        assert!(out.path().join(FINAL_CHECKPOINT).exists());
        assert!(out.path().join(checkpoint_file_name(2)).exists());
        assert_eq!(load_checkpoint(out.path().join(FINAL_CHECKPOINT)).unwrap(), ckpt);
    }
}
