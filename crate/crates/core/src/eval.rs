//! Relighting metrics under the fixed-reference protocol, WHDR with
//! threshold tuning, and scale-invariant albedo error for synthetic data.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{JudgmentSet, LoadedScene, Relation};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::losses::ssim;
use crate::model::Weights;
use crate::scalar::Scalar;

/// Root mean squared error over all pixel-channels.
pub fn rmse<T: Scalar>(pred: &ImageBuffer<T>, target: &ImageBuffer<T>) -> Result<T> {
    pred.ensure_same_dims(target)?;
    let sum: T = pred.pixels().iter().zip(target.pixels()).map(|(&p, &t)| (p - t) * (p - t)).sum();
    Ok((sum / T::from_usize_lossy(pred.pixels().len())).sqrt())
}

/// Per-channel least-squares scale `k_c = ⟨p_c, t_c⟩ / ⟨p_c, p_c⟩` applied to
/// the prediction (no clamping). All-zero channels are left unchanged.
pub fn color_correct<T: Scalar>(pred: &ImageBuffer<T>, target: &ImageBuffer<T>) -> Result<ImageBuffer<T>> {
    pred.ensure_same_dims(target)?;
    let gains = color_gains(pred, target);
    let mut out = pred.clone();
    for (i, v) in out.pixels_mut().iter_mut().enumerate() {
        *v *= gains[i % 3];
    }
    Ok(out)
}

/// The per-channel least-squares gains used by [`color_correct`].
pub fn color_gains<T: Scalar>(pred: &ImageBuffer<T>, target: &ImageBuffer<T>) -> [T; 3] {
    let mut pt = [T::zero(); 3];
    let mut pp = [T::zero(); 3];
    for (i, (&p, &t)) in pred.pixels().iter().zip(target.pixels()).enumerate() {
        pt[i % 3] += p * t;
        pp[i % 3] += p * p;
    }
    [0, 1, 2].map(|c| if pp[c] == T::zero() { T::one() } else { pt[c] / pp[c] })
}

/// `min_{k ≥ 0} ‖k·pred − gt‖ / ‖gt‖`.
pub fn synthetic_albedo_error<T: Scalar>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<T> {
    pred.ensure_same_dims(gt)?;
    let (mut pg, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        pg += p * g;
        pp += p * p;
        gg += g * g;
    }
    if gg == T::zero() {
        return Err(Error::InvalidInput("ground-truth albedo is all zero".into()));
    }
    let k = if pp == T::zero() { T::zero() } else { (pg / pp).max(T::zero()) };
    let err: T = pred.pixels().iter().zip(gt.pixels()).map(|(&p, &g)| (k * p - g) * (k * p - g)).sum();
    Ok((err / gg).sqrt())
}

/// One (input, reference) evaluation pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelightPair {
    pub scene: String,
    pub input_lighting: String,
    pub ref_scene: String,
    pub ref_lighting: String,
}

/// Draws, for every image, `n_refs` references from other scenes under a
/// different lighting id. A pure function of `(seed, scenes)`.
pub fn relight_pairs<T>(scenes: &[LoadedScene<T>], n_refs: usize, seed: u64) -> Vec<RelightPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        for lighting in scene.images.keys() {
            let candidates: Vec<(&str, &str)> = scenes
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, other)| {
                    other.images.keys().filter(|l| *l != lighting).map(|l| (other.scene_id.as_str(), l.as_str()))
                })
                .collect();
            let take = n_refs.min(candidates.len());
            let mut picks = index::sample(&mut rng, candidates.len(), take).into_vec();
            picks.sort_unstable();
            for k in picks {
                let (ref_scene, ref_lighting) = candidates[k];
                pairs.push(RelightPair {
                    scene: scene.scene_id.clone(),
                    input_lighting: lighting.clone(),
                    ref_scene: ref_scene.to_string(),
                    ref_lighting: ref_lighting.to_string(),
                });
            }
        }
    }
    pairs
}

/// What a relighting model sees for one evaluation pair.
pub struct RelightQuery<'a, T> {
    pub pair: &'a RelightPair,
    pub input: &'a ImageBuffer<T>,
    pub reference: &'a ImageBuffer<T>,
}

pub trait Relighter<T> {
    fn relight(&self, query: &RelightQuery<'_, T>) -> Result<ImageBuffer<T>>;
}

impl<T: Scalar> Relighter<T> for Weights<T> {
    fn relight(&self, query: &RelightQuery<'_, T>) -> Result<ImageBuffer<T>> {
        Weights::relight(self, query.input, query.reference)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelightRow {
    #[serde(flatten)]
    pub pair: RelightPair,
    pub raw_rmse: f64,
    pub raw_ssim: f64,
    pub corrected_rmse: f64,
    pub corrected_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelightReport {
    pub seed: u64,
    pub n_refs: usize,
    pub rows: Vec<RelightRow>,
    /// Pairs whose input scene lacks the reference lighting id.
    pub skipped: Vec<RelightPair>,
    pub mean_raw_rmse: f64,
    pub mean_raw_ssim: f64,
    pub mean_corrected_rmse: f64,
    pub mean_corrected_ssim: f64,
}

/// Scores a relighting model against each input scene's true image under
/// the reference lighting, with and without per-channel color correction.
pub fn eval_relight<T: Scalar, M: Relighter<T> + ?Sized>(
    model: &M,
    scenes: &[LoadedScene<T>],
    n_refs: usize,
    seed: u64,
) -> Result<RelightReport> {
    if n_refs == 0 {
        return Err(Error::InvalidInput("n_refs must be at least 1".into()));
    }
    let find = |id: &str| scenes.iter().find(|s| s.scene_id == id).expect("pair refers to a listed scene");
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for pair in relight_pairs(scenes, n_refs, seed) {
        let scene = find(&pair.scene);
        let Some(target) = scene.images.get(&pair.ref_lighting) else {
            skipped.push(pair);
            continue;
        };
        let input = &scene.images[&pair.input_lighting];
        let reference = &find(&pair.ref_scene).images[&pair.ref_lighting];
        let pred = model.relight(&RelightQuery { pair: &pair, input, reference })?;
        pred.ensure_same_dims(target)?;
        let corrected = color_correct(&pred, target)?;
        rows.push(RelightRow {
            raw_rmse: rmse(&pred, target)?.to_f64_lossy(),
            raw_ssim: ssim(&pred, target)?.to_f64_lossy(),
            corrected_rmse: rmse(&corrected, target)?.to_f64_lossy(),
            corrected_ssim: ssim(&corrected, target)?.to_f64_lossy(),
            pair,
        });
    }
    let mean = |f: fn(&RelightRow) -> f64| {
        if rows.is_empty() {
            f64::NAN
        } else {
            rows.iter().map(f).sum::<f64>() / rows.len() as f64
        }
    };
    Ok(RelightReport {
        seed,
        n_refs,
        mean_raw_rmse: mean(|r| r.raw_rmse),
        mean_raw_ssim: mean(|r| r.raw_ssim),
        mean_corrected_rmse: mean(|r| r.corrected_rmse),
        mean_corrected_ssim: mean(|r| r.corrected_ssim),
        rows,
        skipped,
    })
}

/// Row-major single-channel lightness.
#[derive(Clone, Debug, PartialEq)]
pub struct LightnessMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl LightnessMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape(format!("{height}x{width} lightness map with {} values", values.len())));
        }
        Ok(Self { height, width, values })
    }

    /// Mean of R, G and B per pixel.
    pub fn from_image<T: Scalar>(image: &ImageBuffer<T>) -> Self {
        let values = image.lightness().into_iter().map(|v| v.to_f64_lossy()).collect();
        Self { height: image.height(), width: image.width(), values }
    }

    /// Nearest pixel to relative coordinates `(x, y) ∈ [0, 1]²`.
    pub fn sample(&self, x: f64, y: f64) -> Result<f64> {
        if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
            return Err(Error::InvalidInput(format!("judgment point ({x}, {y}) lies outside the image")));
        }
        let col = ((x * self.width as f64) as usize).min(self.width - 1);
        let row = ((y * self.height as f64) as usize).min(self.height - 1);
        Ok(self.values[row * self.width + col])
    }
}

/// `FirstLighter` if `r1/r2 > 1+δ`, `SecondLighter` if `r2/r1 > 1+δ`,
/// otherwise `Equal`; a zero denominator counts as an infinite ratio.
pub fn classify(r1: f64, r2: f64, delta: f64) -> Relation {
    let ratio = |a: f64, b: f64| if b == 0.0 { f64::INFINITY } else { a / b };
    if r1 == 0.0 && r2 == 0.0 {
        Relation::Equal
    } else if ratio(r1, r2) > 1.0 + delta {
        Relation::FirstLighter
    } else if ratio(r2, r1) > 1.0 + delta {
        Relation::SecondLighter
    } else {
        Relation::Equal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhdrResult {
    pub whdr: f64,
    pub delta: f64,
    pub n_comparisons: usize,
    pub total_weight: f64,
    pub disagreement_weight: f64,
}

/// Weighted human disagreement ratio. Comparisons touching a point marked
/// non-opaque are not scored.
pub fn whdr(map: &LightnessMap, judgments: &JudgmentSet, delta: f64) -> Result<WhdrResult> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidInput(format!("delta {delta} must be finite and non-negative")));
    }
    let mut total_weight = 0.0;
    let mut disagreement_weight = 0.0;
    let mut n_comparisons = 0;
    for (index, c) in judgments.comparisons.iter().enumerate() {
        let p1 = judgments.point(c.point1).ok_or(Error::DanglingPoint { index, point: c.point1 })?;
        let p2 = judgments.point(c.point2).ok_or(Error::DanglingPoint { index, point: c.point2 })?;
        if !(p1.opaque && p2.opaque) {
            continue;
        }
        let predicted = classify(map.sample(p1.x, p1.y)?, map.sample(p2.x, p2.y)?, delta);
        n_comparisons += 1;
        total_weight += c.weight;
        if predicted != c.relation {
            disagreement_weight += c.weight;
        }
    }
    let whdr = if total_weight > 0.0 { disagreement_weight / total_weight } else { 0.0 };
    Ok(WhdrResult { whdr, delta, n_comparisons, total_weight, disagreement_weight })
}

/// `0.02, 0.04, …, 0.60`.
pub fn default_delta_grid() -> Vec<f64> {
    (1..=30).map(|i| i as f64 / 50.0).collect()
}

/// Grid value minimizing the pooled weighted disagreement over a split;
/// ties go to the smaller δ.
pub fn tune_delta(maps: &[LightnessMap], judgments: &[JudgmentSet], grid: &[f64]) -> Result<f64> {
    if grid.is_empty() || maps.is_empty() {
        return Err(Error::InvalidInput("delta tuning needs a non-empty grid and split".into()));
    }
    if maps.len() != judgments.len() {
        return Err(Error::InvalidInput(format!("{} lightness maps for {} judgment sets", maps.len(), judgments.len())));
    }
    let mut best: Option<(f64, f64)> = None;
    for &delta in grid {
        let mut disagreement = 0.0;
        for (map, set) in maps.iter().zip(judgments) {
            disagreement += whdr(map, set, delta)?.disagreement_weight;
        }
        best = match best {
            Some((d, score)) if score < disagreement || (score == disagreement && d <= delta) => Some((d, score)),
            _ => Some((delta, disagreement)),
        };
    }
    Ok(best.expect("grid is non-empty").0)
}
