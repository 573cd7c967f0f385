//! Multi-illumination scenes, training-pair augmentation, the synthetic scene
//! generator, and IIW-style lightness judgments.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scalar::Scalar;

pub const ALBEDO_FILE: &str = "albedo.png";

/// One scene directory: `<root>/<scene_id>/<lighting_id>.png`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub images: BTreeMap<String, PathBuf>,
    pub gt_albedo: Option<PathBuf>,
}

impl SceneRecord {
    pub fn lighting_ids(&self) -> impl Iterator<Item = &String> {
        self.images.keys()
    }
}

/// Indexes a multi-illumination dataset. Scenes with fewer than two
/// lightings are skipped with a warning.
pub fn load_multi_illum(root: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(root, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found")));
    }
    let mut scene_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    scene_dirs.sort();

    let mut records = Vec::new();
    for dir in scene_dirs {
        let scene_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut images = BTreeMap::new();
        let mut gt_albedo = None;
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if !is_png || !path.is_file() {
                continue;
            }
            if path.file_name().is_some_and(|n| n == ALBEDO_FILE) {
                gt_albedo = Some(path);
            } else if let Some(stem) = path.file_stem() {
                images.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
        if images.len() < 2 {
            log::warn!("skipping scene {scene_id}: {} lighting(s), need at least 2", images.len());
            continue;
        }
        let mut dims = None;
        for path in images.values().chain(gt_albedo.iter()) {
            let d = image::image_dimensions(path).map_err(|source| Error::Image { path: path.clone(), source })?;
            match dims {
                None => dims = Some(d),
                Some(first) if first != d => {
                    return Err(Error::Shape(format!(
                        "{}: {}x{} differs from scene size {}x{}",
                        path.display(),
                        d.0,
                        d.1,
                        first.0,
                        first.1
                    )))
                }
                Some(_) => {}
            }
        }
        records.push(SceneRecord { scene_id, images, gt_albedo });
    }
    Ok(records)
}

/// A scene with its images decoded into memory.
#[derive(Clone, Debug)]
pub struct LoadedScene<T> {
    pub scene_id: String,
    pub images: BTreeMap<String, ImageBuffer<T>>,
    pub albedo: Option<ImageBuffer<T>>,
}

impl<T: Scalar> LoadedScene<T> {
    pub fn load(record: &SceneRecord) -> Result<Self> {
        let images = record
            .images
            .iter()
            .map(|(id, path)| Ok((id.clone(), ImageBuffer::load_png(path)?)))
            .collect::<Result<_>>()?;
        let albedo = record.gt_albedo.as_ref().map(ImageBuffer::load_png).transpose()?;
        Ok(Self { scene_id: record.scene_id.clone(), images, albedo })
    }

    /// Resamples every image (and the albedo) to `size × size`.
    pub fn resized(&self, size: usize) -> Self {
        Self {
            scene_id: self.scene_id.clone(),
            images: self.images.iter().map(|(k, v)| (k.clone(), v.resize_bilinear(size, size))).collect(),
            albedo: self.albedo.as_ref().map(|a| a.resize_bilinear(size, size)),
        }
    }
}

pub fn load_scenes<T: Scalar>(records: &[SceneRecord]) -> Result<Vec<LoadedScene<T>>> {
    records.iter().map(LoadedScene::load).collect()
}

/// Two images of one scene under different lightings.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample<T> {
    pub image_a: ImageBuffer<T>,
    pub image_b: ImageBuffer<T>,
    pub scene_id: String,
    pub lighting_a: String,
    pub lighting_b: String,
}

/// Uniformly picks a scene, then an ordered pair of distinct lightings.
pub fn sample_training_pair<T: Scalar, R: Rng + ?Sized>(scenes: &[LoadedScene<T>], rng: &mut R) -> Result<PairSample<T>> {
    let eligible: Vec<&LoadedScene<T>> = scenes.iter().filter(|s| s.images.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::NoTrainablePairs);
    }
    let scene = eligible[rng.random_range(0..eligible.len())];
    let n = scene.images.len();
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let (la, a) = scene.images.iter().nth(i).expect("index in range");
    let (lb, b) = scene.images.iter().nth(j).expect("index in range");
    Ok(PairSample {
        image_a: a.clone(),
        image_b: b.clone(),
        scene_id: scene.scene_id.clone(),
        lighting_a: la.clone(),
        lighting_b: lb.clone(),
    })
}

/// Side length of the square crop for a given ratio of the shorter image side.
pub fn crop_side(height: usize, width: usize, ratio: f64) -> usize {
    (ratio * height.min(width) as f64).round() as usize
}

/// Cuts one random square window (shared by both images) and resizes it to
/// `out_size × out_size`.
pub fn paired_crop_resize<T: Scalar, R: Rng + ?Sized>(
    pair: &PairSample<T>,
    ratio_min: f64,
    ratio_max: f64,
    out_size: usize,
    rng: &mut R,
) -> Result<PairSample<T>> {
    if !(ratio_min > 0.0 && ratio_min <= ratio_max && ratio_max <= 1.0) {
        return Err(Error::InvalidInput(format!("crop ratio range [{ratio_min}, {ratio_max}] not within (0, 1]")));
    }
    if out_size < 8 {
        return Err(Error::InvalidInput(format!("output size {out_size} below 8")));
    }
    pair.image_a.ensure_same_dims(&pair.image_b)?;
    let (h, w) = (pair.image_a.height(), pair.image_a.width());
    let ratio = if ratio_min == ratio_max { ratio_min } else { rng.random_range(ratio_min..=ratio_max) };
    let side = crop_side(h, w, ratio);
    if side < 1 {
        return Err(Error::InvalidInput(format!("crop side below one pixel for ratio {ratio} on {h}x{w}")));
    }
    let y0 = rng.random_range(0..=h - side);
    let x0 = rng.random_range(0..=w - side);
    let cut = |img: &ImageBuffer<T>| -> Result<ImageBuffer<T>> { Ok(img.crop(y0, x0, side, side)?.resize_bilinear(out_size, out_size)) };
    Ok(PairSample {
        image_a: cut(&pair.image_a)?,
        image_b: cut(&pair.image_b)?,
        scene_id: pair.scene_id.clone(),
        lighting_a: pair.lighting_a.clone(),
        lighting_b: pair.lighting_b.clone(),
    })
}

/// Gaussian input corruption during the warm-up phase, with `ln σ` drawn
/// from `Normal(log_mean, log_std²)` per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSchedule {
    pub warmup_fraction: f64,
    pub log_mean: f64,
    pub log_std: f64,
    pub enabled: bool,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { warmup_fraction: 0.4, log_mean: -1.2, log_std: 1.2, enabled: true }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if !(self.log_std > 0.0 && self.log_std.is_finite() && self.log_mean.is_finite()) {
            return Err(Error::Config("noise log_std must be > 0 and log_mean finite".into()));
        }
        Ok(())
    }

    /// Whether noise is injected at this point of training.
    pub fn is_active(&self, epoch_fraction: f64) -> bool {
        self.enabled && epoch_fraction < self.warmup_fraction
    }

    pub fn sample_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = Normal::new(self.log_mean, self.log_std).expect("validated schedule").sample(rng);
        z.exp()
    }
}

/// Returns `image + σ·ε` while the schedule is active, the input otherwise.
pub fn apply_noise<T: Scalar, R: Rng + ?Sized>(
    image: &ImageBuffer<T>,
    schedule: &NoiseSchedule,
    epoch_fraction: f64,
    rng: &mut R,
) -> ImageBuffer<T> {
    if !schedule.is_active(epoch_fraction) {
        return image.clone();
    }
    let sigma = schedule.sample_sigma(rng);
    let mut out = image.clone();
    for v in out.pixels_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += T::lit(sigma * e);
    }
    out.mark_noisy()
}

/// Parameters of the procedural multi-illumination generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub n_scenes: usize,
    pub n_lights: usize,
    pub image_size: usize,
    pub n_albedo_regions: usize,
    pub ambient: f64,
    pub seed: u64,
    /// Maximum per-channel attenuation of light colours; 0 gives white lights.
    pub color_jitter: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self { n_scenes: 32, n_lights: 8, image_size: 64, n_albedo_regions: 6, ambient: 0.25, seed: 0, color_jitter: 0.5 }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_lights < 2 {
            return Err(Error::Config("n_lights must be at least 2".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image_size must be at least 16".into()));
        }
        if !(0.0..1.0).contains(&self.ambient) && self.ambient != 1.0 {
            return Err(Error::Config(format!("ambient {} outside [0, 1]", self.ambient)));
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return Err(Error::Config(format!("color_jitter {} outside [0, 1]", self.color_jitter)));
        }
        Ok(())
    }
}

/// A directional light shared by every synthetic scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirectionalLight {
    pub direction: [f64; 3],
    pub color: [f64; 3],
}

/// The dataset-wide lighting patterns for a spec.
pub fn synthetic_lights(spec: &SyntheticSceneSpec) -> Vec<DirectionalLight> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.n_lights)
        .map(|_| {
            let z: f64 = rng.random_range(0.3..0.95);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let color = [0; 3].map(|_| 1.0 - spec.color_jitter * rng.random::<f64>());
            DirectionalLight { direction: [r * phi.cos(), r * phi.sin(), z], color }
        })
        .collect()
}

/// Ground truth of one synthetic scene.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub albedo: ImageBuffer<f64>,
    /// Unit normals, row-major `H × W`.
    pub normals: Vec<[f64; 3]>,
}

pub fn synthesize_scene(spec: &SyntheticSceneSpec, index: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1 + index as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    let s = spec.image_size;
    let base = [0; 3].map(|_| rng.random_range(0.2..0.9));
    let mut albedo = ImageBuffer::filled(s, s, base);
    for _ in 0..spec.n_albedo_regions {
        let color = [0; 3].map(|_| rng.random_range(0.05..0.95));
        let cy = rng.random_range(0.0..s as f64);
        let cx = rng.random_range(0.0..s as f64);
        let ry = rng.random_range(0.08..0.3) * s as f64;
        let rx = rng.random_range(0.08..0.3) * s as f64;
        let ellipse = rng.random_bool(0.5);
        for y in 0..s {
            for x in 0..s {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    for (c, &v) in color.iter().enumerate() {
                        albedo.set(y, x, c, v);
                    }
                }
            }
        }
    }

    // Smoothed random heightfield -> normals.
    let noise: Vec<f64> = (0..s * s).map(|_| StandardNormal.sample(&mut rng)).collect();
    let height = smooth(&noise, s, s as f64 / 10.0);
    let mut grads = Vec::with_capacity(s * s);
    for y in 0..s {
        for x in 0..s {
            let hx = height[y * s + (x + 1).min(s - 1)] - height[y * s + x.saturating_sub(1)];
            let hy = height[(y + 1).min(s - 1) * s + x] - height[y.saturating_sub(1) * s + x];
            grads.push((hx * 0.5, hy * 0.5));
        }
    }
    let rms = (grads.iter().map(|(a, b)| a * a + b * b).sum::<f64>() / grads.len() as f64).sqrt().max(1e-12);
    let slope = 0.9 / rms;
    let normals = grads
        .iter()
        .map(|&(gx, gy)| {
            let n = [-gx * slope, -gy * slope, 1.0];
            let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            [n[0] / len, n[1] / len, n[2] / len]
        })
        .collect();
    SyntheticScene { albedo, normals }
}

fn smooth(src: &[f64], s: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / total).collect();
    let wrap = |i: isize| i.rem_euclid(s as isize) as usize;
    let mut tmp = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            tmp[y * s + x] = k.iter().enumerate().map(|(t, kv)| kv * src[y * s + wrap(x as isize + t as isize - r)]).sum();
        }
    }
    let mut out = vec![0.0; s * s];
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = k.iter().enumerate().map(|(t, kv)| kv * tmp[wrap(y as isize + t as isize - r) * s + x]).sum();
        }
    }
    out
}

/// `clip(A ⊙ c · (ambient + (1 − ambient)·max(0, n·d)), 0, 1)`.
pub fn render_lambertian(scene: &SyntheticScene, light: &DirectionalLight, ambient: f64) -> ImageBuffer<f64> {
    let a = &scene.albedo;
    ImageBuffer::from_fn(a.height(), a.width(), |y, x, c| {
        let n = scene.normals[y * a.width() + x];
        let d = light.direction;
        let shade = (n[0] * d[0] + n[1] * d[1] + n[2] * d[2]).max(0.0);
        (a.get(y, x, c) * light.color[c] * (ambient + (1.0 - ambient) * shade)).clamp(0.0, 1.0)
    })
}

pub fn synthetic_scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

pub fn synthetic_lighting_id(index: usize) -> String {
    format!("light_{index:02}")
}

/// Renders `spec.n_scenes` scenes under the shared lights into `out_path`
/// using the multi-illumination layout, plus `albedo.png` per scene.
pub fn generate_synthetic_dataset(spec: &SyntheticSceneSpec, out_path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    spec.validate()?;
    let out = out_path.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let lights = synthetic_lights(spec);
    let mut records = Vec::with_capacity(spec.n_scenes);
    for i in 0..spec.n_scenes {
        let scene = synthesize_scene(spec, i);
        let scene_id = synthetic_scene_id(i);
        let dir = out.join(&scene_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut images = BTreeMap::new();
        for (k, light) in lights.iter().enumerate() {
            let id = synthetic_lighting_id(k);
            let path = dir.join(format!("{id}.png"));
            render_lambertian(&scene, light, spec.ambient).save_png(&path)?;
            images.insert(id, path);
        }
        let albedo_path = dir.join(ALBEDO_FILE);
        scene.albedo.save_png(&albedo_path)?;
        records.push(SceneRecord { scene_id, images, gt_albedo: Some(albedo_path) });
    }
    Ok(records)
}

/// Which point of a comparison has greater lightness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    FirstLighter,
    SecondLighter,
    Equal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JudgmentPoint {
    pub id: i64,
    /// Relative column in `[0, 1]`.
    pub x: f64,
    /// Relative row in `[0, 1]`.
    pub y: f64,
    pub opaque: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub point1: i64,
    pub point2: i64,
    pub relation: Relation,
    pub weight: f64,
}

/// Pairwise human lightness judgments for one photo.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct JudgmentSet {
    pub points: Vec<JudgmentPoint>,
    pub comparisons: Vec<Comparison>,
}

#[derive(Deserialize)]
struct RawPoint {
    id: i64,
    x: f64,
    y: f64,
    #[serde(default = "default_true")]
    opaque: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Deserialize)]
struct RawComparison {
    point1: i64,
    point2: i64,
    darker: Option<String>,
    darker_score: Option<f64>,
}

#[derive(Deserialize)]
struct RawJudgments {
    #[serde(default)]
    intrinsic_points: Vec<RawPoint>,
    #[serde(default)]
    intrinsic_comparisons: Vec<RawComparison>,
}

impl JudgmentSet {
    /// Validates cross-references and weights.
    pub fn new(points: Vec<JudgmentPoint>, comparisons: Vec<Comparison>) -> Result<Self> {
        let ids: HashSet<i64> = points.iter().map(|p| p.id).collect();
        for (index, c) in comparisons.iter().enumerate() {
            for p in [c.point1, c.point2] {
                if !ids.contains(&p) {
                    return Err(Error::DanglingPoint { index, point: p });
                }
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidWeight { index, weight: c.weight });
            }
        }
        Ok(Self { points, comparisons })
    }

    /// Parses the IIW release JSON, where `darker` names the darker point
    /// (`"1"`, `"2"`) or `"E"` for equal lightness.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let raw: RawJudgments = serde_json::from_str(text)?;
        Ok(Self::from_raw(raw))
    }

    fn from_raw(raw: RawJudgments) -> Self {
        let points = raw.intrinsic_points.into_iter().map(|p| JudgmentPoint { id: p.id, x: p.x, y: p.y, opaque: p.opaque }).collect();
        let comparisons = raw
            .intrinsic_comparisons
            .into_iter()
            .map(|c| Comparison {
                point1: c.point1,
                point2: c.point2,
                relation: match c.darker.as_deref() {
                    Some("1") => Relation::SecondLighter,
                    Some("2") => Relation::FirstLighter,
                    _ => Relation::Equal,
                },
                weight: c.darker_score.unwrap_or(0.0),
            })
            .collect();
        Self { points, comparisons }
    }

    pub fn point(&self, id: i64) -> Option<&JudgmentPoint> {
        self.points.iter().find(|p| p.id == id)
    }
}

/// Loads and validates an IIW judgment file.
pub fn load_iiw_judgments(path: impl AsRef<Path>) -> Result<JudgmentSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: RawJudgments = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
    for (index, c) in raw.intrinsic_comparisons.iter().enumerate() {
        match c.darker.as_deref() {
            Some("1" | "2" | "E") | None => {}
            Some(other) => {
                return Err(Error::InvalidInput(format!("{}: comparison {index} has label {other:?}", path.display())))
            }
        }
    }
    let set = JudgmentSet::from_raw(raw);
    JudgmentSet::new(set.points, set.comparisons)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(id: &str, n: usize) -> LoadedScene<f32> {
        let images = (0..n)
            .map(|k| (format!("l{k}"), ImageBuffer::filled(4, 4, [k as f32 / 10.0; 3])))
            .collect();
        LoadedScene { scene_id: id.into(), images, albedo: None }
    }

    #[test]
    fn pair_sampling_is_distinct_and_deterministic() {
        let scenes = vec![scene("a", 2)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = HashSet::new();
        for _ in 0..50 {
            let p = sample_training_pair(&scenes, &mut rng).unwrap();
            assert_ne!(p.lighting_a, p.lighting_b);
            seen.insert((p.lighting_a, p.lighting_b));
        }
        assert_eq!(seen.len(), 2);

        let scenes = vec![scene("a", 3), scene("b", 5)];
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10)
                .map(|_| {
                    let p = sample_training_pair(&scenes, &mut rng).unwrap();
                    (p.scene_id, p.lighting_a, p.lighting_b)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert!(matches!(sample_training_pair(&[scene("c", 1)], &mut rng), Err(Error::NoTrainablePairs)));
    }

    #[test]
    fn pair_sampling_is_uniform_over_scenes() {
        let scenes: Vec<_> = (0..4).map(|i| scene(&format!("s{i}"), 3)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = BTreeMap::new();
        for _ in 0..1000 {
            *counts.entry(sample_training_pair(&scenes, &mut rng).unwrap().scene_id).or_insert(0usize) += 1;
        }
        // Binomial(1000, 1/4): mean 250, sd ≈ 13.7.
        let bound = 3.0 * (1000.0f64 * 0.25 * 0.75).sqrt();
        let chi2: f64 = counts.values().map(|&c| (c as f64 - 250.0).powi(2) / 250.0).sum();
        assert_eq!(counts.len(), 4);
        for &c in counts.values() {
            assert!((c as f64 - 250.0).abs() <= bound, "count {c}");
        }
        // 3 degrees of freedom, p = 0.001 critical value.
        assert!(chi2 < 16.27);
    }

    fn gradient_pair(h: usize, w: usize) -> PairSample<f64> {
        let a = ImageBuffer::from_fn(h, w, |y, x, c| ((y * 31 + x * 17 + c * 7) % 97) as f64 / 96.0);
        PairSample { image_a: a.clone(), image_b: a, scene_id: "s".into(), lighting_a: "1".into(), lighting_b: "2".into() }
    }

    #[test]
    fn crop_is_shared_and_sized() {
        let pair = gradient_pair(40, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let out = paired_crop_resize(&pair, 0.2, 1.0, 16, &mut rng).unwrap();
            assert_eq!(out.image_a, out.image_b);
            assert_eq!((out.image_a.height(), out.image_a.width()), (16, 16));
        }
        assert_eq!(crop_side(384, 512, 0.5), 192);
        let big = gradient_pair(384, 512);
        let out = paired_crop_resize(&big, 0.5, 0.5, 256, &mut rng).unwrap();
        assert_eq!((out.image_a.height(), out.image_a.width()), (256, 256));
    }

    #[test]
    fn full_ratio_crop_on_square_input_is_pure_resize() {
        let pair = gradient_pair(24, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = paired_crop_resize(&pair, 1.0, 1.0, 12, &mut rng).unwrap();
        assert_eq!(out.image_a, pair.image_a.resize_bilinear(12, 12));
        assert!(paired_crop_resize(&pair, 0.0, 1.0, 12, &mut rng).is_err());
        assert!(paired_crop_resize(&pair, 0.5, 0.4, 12, &mut rng).is_err());
        assert!(paired_crop_resize(&pair, 0.5, 1.0, 4, &mut rng).is_err());
        assert!(paired_crop_resize(&gradient_pair(2, 2), 0.2, 0.2, 8, &mut rng).is_err());
    }

    #[test]
    fn noise_schedule_gating() {
        let img = ImageBuffer::<f32>::filled(8, 8, [0.5; 3]);
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = apply_noise(&img, &s, 0.5, &mut rng);
        assert_eq!(same, img);
        assert!(!same.is_noisy());
        let noisy = apply_noise(&img, &s, 0.1, &mut rng);
        assert!(noisy.is_noisy());
        assert_ne!(noisy, img);
        let off = NoiseSchedule { enabled: false, ..s };
        for f in [0.0, 0.2, 0.9] {
            assert_eq!(apply_noise(&img, &off, f, &mut rng), img);
        }
    }

    #[test]
    fn sigma_distribution_matches_log_normal() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let logs: Vec<f64> = (0..100_000).map(|_| s.sample_sigma(&mut rng).ln()).collect();
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        let sd = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (logs.len() - 1) as f64).sqrt();
        assert!((mean + 1.2).abs() < 0.02, "mean {mean}");
        assert!((sd - 1.2).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn rendering_respects_albedo_bound() {
        let spec = SyntheticSceneSpec { image_size: 16, ..Default::default() };
        let scene = synthesize_scene(&spec, 0);
        for light in synthetic_lights(&spec) {
            let img = render_lambertian(&scene, &light, spec.ambient);
            for y in 0..16 {
                for x in 0..16 {
                    for c in 0..3 {
                        assert!(img.get(y, x, c) <= scene.albedo.get(y, x, c) * light.color[c] + 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn iiw_json_parsing() {
        let text = r#"{"intrinsic_points":[{"id":1,"x":0.1,"y":0.2,"opaque":true},{"id":2,"x":0.5,"y":0.5}],
            "intrinsic_comparisons":[{"point1":1,"point2":2,"darker":"E","darker_score":0.75}]}"#;
        let set = JudgmentSet::from_json(text).unwrap();
        assert_eq!(set.comparisons.len(), 1);
        assert_eq!(set.comparisons[0].relation, Relation::Equal);
        assert_eq!(set.comparisons[0].weight, 0.75);
        let darker_first = r#"{"intrinsic_points":[{"id":1,"x":0,"y":0},{"id":2,"x":1,"y":1}],
            "intrinsic_comparisons":[{"point1":1,"point2":2,"darker":"1","darker_score":1.0}]}"#;
        assert_eq!(JudgmentSet::from_json(darker_first).unwrap().comparisons[0].relation, Relation::SecondLighter);
    }
}
