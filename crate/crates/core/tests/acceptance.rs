//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Set `ACCEPTANCE_ONLY=3,7` to run a subset.

use std::cell::OnceCell;
use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use latent_relight::data::{
    generate_synthetic_dataset, load_scenes, Comparison, JudgmentPoint, JudgmentSet, LoadedScene, Relation,
    SyntheticSceneSpec,
};
use latent_relight::eval::{
    color_correct, eval_relight, rmse, synthetic_albedo_error, tune_delta, whdr, LightnessMap, RelightQuery, Relighter,
};
use latent_relight::losses::{coding_rate, coding_rate_with_grad, ssim, ssim_graph, LossBreakdown, SSIM_C1};
use latent_relight::model::{constrained_scale, init_model, interpolate_extrinsics, scaling_band, InjectionHead};
use latent_relight::train::{decode_checkpoint, encode_checkpoint, fit, FitOptions, MetricsRow, TrainConfig};
use latent_relight::{image, ExtrinsicCode, Graph, ImageBuffer, ModelConfig, Tensor, Weights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn selected() -> Option<BTreeSet<u32>> {
    let spec = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(spec.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

// 1. Full-scale configuration ships as the defaults.
fn full_scale_config() -> Outcome {
    let t = TrainConfig::default();
    let m = ModelConfig::default();
    let ok = t.batch_size == 256
        && t.epochs == 1000
        && t.learning_rate == 2e-4
        && t.weight_decay == 1e-2
        && t.noise.warmup_fraction == 0.4
        && m.base_resolution == 256;
    check(
        ok,
        format!(
            "defaults: batch {} epochs {} lr {} wd {} warmup {} res {}; full-scale benchmark numbers are out of scope",
            t.batch_size, t.epochs, t.learning_rate, t.weight_decay, t.noise.warmup_fraction, m.base_resolution
        ),
    )
}

fn row_normalized(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, d], |_| rng.sample::<f64, _>(StandardNormal));
    for row in t.data_mut().chunks_mut(d) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}

// 2. Coding-rate gradient against central differences.
fn coding_rate_gradient() -> Outcome {
    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;
    let lambda = 0.5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let s = row_normalized(&mut rng, 16, 8);
        let (_, grad) = coding_rate_with_grad(&s, lambda, true).map_err(|e| e.to_string())?;
        let grad = grad.expect("gradient requested");
        for i in 0..s.numel() {
            let mut plus = s.clone();
            plus.data_mut()[i] += H;
            let mut minus = s.clone();
            minus.data_mut()[i] -= H;
            let fd = (coding_rate(&plus, lambda).unwrap() - coding_rate(&minus, lambda).unwrap()) / (2.0 * H);
            let a = grad.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < TOL && elapsed < Duration::from_secs(10),
        format!("max relative error {worst:.2e} (< {TOL:.0e}), {:.2}s (< 10s)", elapsed.as_secs_f64()),
    )
}

// 3. Closed-form coding rates.
fn coding_rate_closed_forms() -> Outcome {
    const TOL: f64 = 1e-9;
    let cases = [
        ("1x1 [[1]]", Tensor::new(&[1, 1], vec![1.0]).unwrap(), 2.0f64.ln()),
        ("identical rows", Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap(), 3.0f64.ln()),
        ("orthogonal rows", Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 4.0f64.ln()),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, s, expected) in cases {
        let got: f64 = coding_rate(&s, 1.0).map_err(|e| e.to_string())?;
        let err = (got - expected).abs();
        ok &= err < TOL;
        parts.push(format!("{name} err {err:.1e}"));
    }
    check(ok, parts.join(", "))
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer<f64> {
    ImageBuffer::from_fn(h, w, |_, _, _| rng.random::<f64>())
}

// 4. SSIM properties and gradient.
fn ssim_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_image(&mut rng, 16, 16);
    let b = random_image(&mut rng, 16, 16);
    let self_err = (ssim(&a, &a).unwrap() - 1.0).abs();
    let sym_err = (ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs();
    let zero = ImageBuffer::filled(16, 16, [0.0; 3]);
    let one = ImageBuffer::filled(16, 16, [1.0; 3]);
    let const_err = (ssim(&zero, &one).unwrap() - SSIM_C1 / (1.0 + SSIM_C1)).abs();

    let x = random_image(&mut rng, 8, 8);
    let y = random_image(&mut rng, 8, 8);
    let mut g = Graph::new();
    let xv = g.param(image::images_to_tensor(&[&x]).unwrap());
    let yv = g.constant(image::images_to_tensor(&[&y]).unwrap());
    let s = ssim_graph(&mut g, xv, yv);
    let grad = g.backward(s).take(xv).expect("ssim gradient");
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, &analytic) in grad.data().iter().enumerate() {
        let mut p = x.clone();
        p.pixels_mut()[chw_to_hwc(i, 8, 8)] += h;
        let mut m = x.clone();
        m.pixels_mut()[chw_to_hwc(i, 8, 8)] -= h;
        let fd = (ssim(&p, &y).unwrap() - ssim(&m, &y).unwrap()) / (2.0 * h);
        worst = worst.max((analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6));
    }
    check(
        self_err <= 1e-9 && sym_err <= 1e-9 && const_err <= 1e-6 && worst < 1e-3,
        format!("self {self_err:.1e}, symmetry {sym_err:.1e}, constant {const_err:.1e}, gradient rel err {worst:.1e}"),
    )
}

/// Index into an interleaved `[H, W, 3]` buffer for element `i` of `[1, 3, H, W]`.
fn chw_to_hwc(i: usize, h: usize, w: usize) -> usize {
    let c = i / (h * w);
    let p = i % (h * w);
    p * 3 + c
}

fn random_head(rng: &mut ChaCha8Rng, code_dim: usize, hidden: usize, channels: usize, bias_scale: f64) -> InjectionHead<f64> {
    let mut normal = |shape: &[usize], scale: f64| Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal));
    InjectionHead {
        fc0_weight: normal(&[hidden, code_dim], 1.0),
        fc0_bias: normal(&[hidden], 0.5),
        fc1_weight: normal(&[channels, hidden], 1.0),
        fc1_bias: normal(&[channels], bias_scale),
    }
}

fn random_code(rng: &mut ChaCha8Rng, dim: usize) -> ExtrinsicCode<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    ExtrinsicCode::from_vec(v.into_iter().map(|x| x / n).collect()).unwrap()
}

// 5. Constrained scaling: identity at α = 0 and the modulation bound.
fn constrained_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, h, w, dim) = (6, 5, 5, 8);
    for _ in 0..100 {
        let f = Tensor::from_fn(&[c, h, w], |_| rng.sample::<f64, _>(StandardNormal));
        let code = random_code(&mut rng, dim);
        let head = random_head(&mut rng, dim, 16, c, 1.0);
        let out = constrained_scale(&f, &code, 0.0, &head).map_err(|e| e.to_string())?;
        if out != f {
            return Err("alpha = 0 changed the feature map".into());
        }
    }
    // Power-of-two features make F·s exact, so F̃/F recovers s without rounding.
    let mut worst = Vec::new();
    for alpha in [5e-4, 1e-3, 5e-3, 1e-2] {
        let mut sup = 0.0f64;
        for trial in 0..100 {
            let f = Tensor::from_fn(&[c, h, w], |_| {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * 2f64.powi(rng.random_range(-6..=6))
            });
            let code = random_code(&mut rng, dim);
            // Large output biases saturate tanh and exercise the clamp.
            let bias = if trial % 2 == 0 { 1.0 } else { 50.0 };
            let out = constrained_scale(&f, &code, alpha, &random_head(&mut rng, dim, 16, c, bias)).map_err(|e| e.to_string())?;
            for (&a, &b) in out.data().iter().zip(f.data()) {
                sup = sup.max((a / b - 1.0).abs());
            }
        }
        if sup > alpha {
            return Err(format!("alpha {alpha}: sup |F~/F - 1| = {sup:e}"));
        }
        let (lo, hi) = scaling_band(alpha);
        worst.push(format!("{alpha:e}: {sup:.4e} (band [{lo}, {hi}])"));
    }
    Ok(format!("identity on 100 draws; sup |F~/F - 1| per alpha {}", worst.join(", ")))
}

// 6. Albedo pathway ignores the extrinsic code.
fn albedo_invariance(trained: &Weights<f32>, label: &str) -> Outcome {
    let untrained = init_model::<f32>(&ModelConfig::tiny()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = ImageBuffer::from_fn(64, 64, |y, x, c| (((y * 3 + x * 5 + c * 7) % 17) as f32) / 16.0);
    for (name, w) in [("untrained", &untrained), (label, trained)] {
        let (s, _) = w.encode(&img).map_err(|e| e.to_string())?;
        let dim = w.config().extrinsic_dim;
        let reference = w.decode(&s, &random_code(&mut rng, dim).cast(), Some(0.0)).unwrap();
        for _ in 1..10 {
            let out = w.decode(&s, &random_code(&mut rng, dim).cast(), Some(0.0)).unwrap();
            if out != reference {
                return Err(format!("{name}: albedo decode depends on the code"));
            }
        }
    }
    Ok(format!("bitwise identical across 10 codes (untrained, {label})"))
}

trait CastCode {
    fn cast(&self) -> ExtrinsicCode<f32>;
}

impl CastCode for ExtrinsicCode<f64> {
    fn cast(&self) -> ExtrinsicCode<f32> {
        ExtrinsicCode::from_vec(self.as_slice().iter().map(|&v| v as f32).collect()).unwrap()
    }
}

/// Straight-from-the-definition WHDR over per-point lightness values.
fn whdr_oracle(lightness: &[f64], comps: &[(usize, usize, Relation, f64)], delta: f64) -> (f64, f64) {
    let (mut total, mut wrong) = (0.0, 0.0);
    for &(i, j, label, w) in comps {
        let (a, b) = (lightness[i], lightness[j]);
        let predicted = if a / b > 1.0 + delta {
            Relation::FirstLighter
        } else if b / a > 1.0 + delta {
            Relation::SecondLighter
        } else {
            Relation::Equal
        };
        total += w;
        if predicted != label {
            wrong += w;
        }
    }
    (if total > 0.0 { wrong / total } else { 0.0 }, wrong)
}

const GRID5: [f64; 5] = [0.2, 0.23, 0.27, 0.33, 0.41];
const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
const RELATIONS: [Relation; 3] = [Relation::FirstLighter, Relation::SecondLighter, Relation::Equal];

/// Four points laid out on a 1×4 map, one per pixel.
fn judgment_set(comps: &[(usize, usize, Relation, f64)]) -> JudgmentSet {
    let points = (0..4).map(|k| JudgmentPoint { id: k as i64, x: (k as f64 + 0.5) / 4.0, y: 0.5, opaque: true }).collect();
    let comparisons = comps
        .iter()
        .map(|&(i, j, relation, weight)| Comparison { point1: i as i64, point2: j as i64, relation, weight })
        .collect();
    JudgmentSet::new(points, comparisons).unwrap()
}

// 7. WHDR against brute-force enumeration, and δ tuning.
fn whdr_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let deltas = [0.05, 0.1, 0.2];
    let n_lightness = 5usize.pow(4);
    let lightness_at = |k: usize| -> Vec<f64> { (0..4).map(|p| GRID5[(k / 5usize.pow(p as u32)) % 5]).collect() };
    let mut checked = 0usize;
    let mut cursor = 0usize;
    for n in 1..=6usize {
        for labels in 0..3usize.pow(n as u32) {
            for weights in 0..(1usize << n) {
                let comps: Vec<_> = (0..n)
                    .map(|k| {
                        let relation = RELATIONS[(labels / 3usize.pow(k as u32)) % 3];
                        let weight = if weights >> k & 1 == 1 { 1.0 } else { 0.2 };
                        (PAIRS[k].0, PAIRS[k].1, relation, weight)
                    })
                    .collect();
                let set = judgment_set(&comps);
                // Cycle through the 5⁴ lightness assignments so each set sees a few
                // and every assignment is visited many times overall.
                for _ in 0..3 {
                    let values = lightness_at(cursor % n_lightness);
                    cursor += 1;
                    let map = LightnessMap::new(1, 4, values.clone()).unwrap();
                    for &delta in &deltas {
                        let got = whdr(&map, &set, delta).map_err(|e| e.to_string())?;
                        let (expected, _) = whdr_oracle(&values, &comps, delta);
                        if got.whdr != expected {
                            return Err(format!("mismatch: {comps:?} at {values:?}, delta {delta}: {} vs {expected}", got.whdr));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }

    // δ tuning: pooled minimizer over random splits, rechecked exhaustively.
    let grid: Vec<f64> = (1..=30).map(|i| i as f64 / 50.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n_images = rng.random_range(1..=4);
        let mut maps = Vec::new();
        let mut sets = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..n_images {
            let values: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let mut comps = Vec::new();
            for &(i, j) in &PAIRS {
                if rng.random::<bool>() {
                    let weight = if rng.random::<bool>() { 1.0 } else { 0.2 };
                    comps.push((i, j, RELATIONS[rng.random_range(0..3)], weight));
                }
            }
            maps.push(LightnessMap::new(1, 4, values.clone()).unwrap());
            sets.push(judgment_set(&comps));
            raw.push((values, comps));
        }
        let got = tune_delta(&maps, &sets, &grid).map_err(|e| e.to_string())?;
        let pooled = |d: f64| raw.iter().map(|(v, c)| whdr_oracle(v, c, d).1).sum::<f64>();
        let best = grid.iter().map(|&d| pooled(d)).fold(f64::INFINITY, f64::min);
        let first_best = grid.iter().copied().find(|&d| pooled(d) == best).unwrap();
        if got != first_best {
            return Err(format!("tune_delta picked {got}, exhaustive minimizer {first_best}"));
        }
    }
    let elapsed = start.elapsed();
    check(
        elapsed < Duration::from_secs(60),
        format!("{checked} evaluations match brute force; 200 tuning splits agree; {:.1}s (< 60s)", elapsed.as_secs_f64()),
    )
}

// 8. Per-channel color correction.
fn color_correction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_exact = 0.0f64;
    for k in [[0.5, 1.0, 2.0], [2.0, 0.5, 1.0], [1.0, 1.0, 1.0], [0.5, 0.5, 2.0]] {
        let target = random_image(&mut rng, 12, 12);
        let pred = ImageBuffer::from_fn(12, 12, |y, x, c| k[c] * target.get(y, x, c));
        let e = rmse(&color_correct(&pred, &target).unwrap(), &target).unwrap();
        worst_exact = worst_exact.max(e);
    }
    let mut violations = 0;
    for _ in 0..100 {
        let target = random_image(&mut rng, 12, 12);
        let pred = random_image(&mut rng, 12, 12);
        let raw = rmse(&pred, &target).unwrap();
        let corrected = rmse(&color_correct(&pred, &target).unwrap(), &target).unwrap();
        if corrected > raw + 1e-12 {
            violations += 1;
        }
    }
    check(
        worst_exact < 1e-9 && violations == 0,
        format!("scaled-target RMSE after correction {worst_exact:.1e}; {violations}/100 random pairs got worse"),
    )
}

struct Identity;

impl Relighter<f32> for Identity {
    fn relight(&self, q: &RelightQuery<'_, f32>) -> latent_relight::Result<ImageBuffer<f32>> {
        Ok(q.input.clone())
    }
}

struct TinyRun {
    weights: Weights<f32>,
    held_out: Vec<LoadedScene<f32>>,
    train_time: Duration,
    steps: u64,
}

const TINY_STEPS: u64 = 2000;

/// 40 generated scenes × 8 lights; the first 32 train, the last 8 are held out.
fn tiny_run(steps: u64) -> TinyRun {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec { n_scenes: 40, n_lights: 8, image_size: 64, seed: 7, ..Default::default() };
    let records = generate_synthetic_dataset(&spec, dir.path()).unwrap();
    let scenes = load_scenes::<f32>(&records).unwrap();
    let (train, held) = scenes.split_at(32);
    let model = ModelConfig::tiny();
    let cfg = TrainConfig::tiny();
    let start = Instant::now();
    let progress = |row: &MetricsRow| {
        if row.step.is_multiple_of(250) {
            eprintln!("  tiny run step {} ({:.0}s): {}", row.step, row.wall_time_s, row.breakdown);
        }
    };
    let ckpt = fit(&model, &cfg, train, FitOptions { stop_after: Some(steps), on_step: Some(Box::new(progress)), ..Default::default() })
        .expect("tiny training run");
    TinyRun { weights: ckpt.weights, held_out: held.to_vec(), train_time: start.elapsed(), steps: ckpt.step }
}

// 9. End-to-end tiny training.
fn end_to_end(run: &TinyRun) -> Outcome {
    let w = &run.weights;
    let held = &run.held_out;
    let model = eval_relight(w, held, 4, 1).map_err(|e| e.to_string())?;
    let baseline = eval_relight(&Identity, held, 4, 1).map_err(|e| e.to_string())?;
    let ratio_a = model.mean_raw_rmse / baseline.mean_raw_rmse;

    let feats: Vec<Vec<_>> = held.iter().map(|s| s.images.values().map(|im| w.encode(im).unwrap().0).collect()).collect();
    let (mut same, mut n_same, mut diff, mut n_diff) = (0.0f64, 0usize, 0.0f64, 0usize);
    for (i, fi) in feats.iter().enumerate() {
        for a in 0..fi.len() {
            for b in a + 1..fi.len() {
                same += fi[a].distance(&fi[b]).unwrap() as f64;
                n_same += 1;
            }
            for fj in &feats[i + 1..] {
                // Same lighting, different scene.
                diff += fi[a].distance(&fj[a]).unwrap() as f64;
                n_diff += 1;
            }
        }
    }
    let ratio_b = (same / n_same as f64) / (diff / n_diff as f64);

    let mut wins = 0;
    for s in held {
        let gt = s.albedo.as_ref().expect("synthetic scenes carry albedo");
        let (mut est, mut raw) = (0.0f32, 0.0f32);
        for im in s.images.values() {
            est += synthetic_albedo_error(&w.estimate_albedo(im).unwrap(), gt).unwrap();
            raw += synthetic_albedo_error(im, gt).unwrap();
        }
        if est < raw {
            wins += 1;
        }
    }
    let win_rate = wins as f64 / held.len() as f64;

    let scene = &held[0];
    let mut imgs = scene.images.values();
    let input = imgs.next().unwrap();
    let (ref_a, ref_b) = (&held[1].images.values().nth(2).unwrap(), &held[2].images.values().nth(5).unwrap());
    let (s, _) = w.encode(input).unwrap();
    let (_, ca) = w.encode(ref_a).unwrap();
    let (_, cb) = w.encode(ref_b).unwrap();
    let t0 = w.decode(&s, &interpolate_extrinsics(&ca, &cb, 0.0).unwrap(), None).unwrap();
    let t1 = w.decode(&s, &interpolate_extrinsics(&ca, &cb, 1.0).unwrap(), None).unwrap();
    let endpoints = t0 == w.relight(input, ref_a).unwrap() && t1 == w.relight(input, ref_b).unwrap();

    let in_budget = run.train_time <= Duration::from_secs(30 * 60);
    let detail = format!(
        "{} steps in {:.0}s (<= 1800s); (a) relit RMSE {:.4} / identity {:.4} = {:.3} (<= 0.7); \
         (b) same/different-scene intrinsic distance {:.3} (<= 0.8); (c) albedo wins {wins}/{} (>= 80%); (d) endpoints bitwise {endpoints}",
        run.steps,
        run.train_time.as_secs_f64(),
        model.mean_raw_rmse,
        baseline.mean_raw_rmse,
        ratio_a,
        ratio_b,
        held.len(),
    );
    check(in_budget && ratio_a <= 0.7 && ratio_b <= 0.8 && win_rate >= 0.8 && endpoints, detail)
}

// 10. Reproducibility and bit-exact resume.
fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec { n_scenes: 4, n_lights: 3, image_size: 64, seed: 10, ..Default::default() };
    let scenes = load_scenes::<f32>(&generate_synthetic_dataset(&spec, dir.path()).unwrap()).unwrap();
    let model = ModelConfig::tiny();
    let cfg = TrainConfig { batch_size: 4, ..TrainConfig::tiny() };
    let record = |stop: u64, resume| {
        let rows = std::rc::Rc::new(std::cell::RefCell::new(Vec::<LossBreakdown>::new()));
        let sink = rows.clone();
        let ckpt = fit(
            &model,
            &cfg,
            &scenes,
            FitOptions { resume, stop_after: Some(stop), on_step: Some(Box::new(move |r: &MetricsRow| sink.borrow_mut().push(r.breakdown.clone()))) },
        )
        .unwrap();
        let rows = rows.borrow().clone();
        (ckpt, rows)
    };
    let bits = |rows: &[LossBreakdown]| -> Vec<[u64; 6]> {
        rows.iter()
            .map(|b| [b.relight, b.reconstruction, b.intrinsic_distance, b.intrinsic_reg, b.extrinsic_reg, b.total].map(f64::to_bits))
            .collect()
    };
    let (_, first) = record(10, None);
    let (full, second) = record(10, None);
    if first.len() != 10 || bits(&first) != bits(&second) {
        return Err("loss breakdowns differ between identical runs".into());
    }
    let (half, head) = record(5, None);
    let restored = decode_checkpoint(&encode_checkpoint(&half).unwrap()).unwrap();
    let (resumed, tail) = record(10, Some(restored));
    let joined: Vec<_> = head.into_iter().chain(tail).collect();
    check(
        resumed == full && bits(&joined) == bits(&first),
        format!("10 breakdowns bitwise equal across runs; 5 + save/load + 5 matches uninterrupted: {}", resumed == full),
    )
}

#[test]
fn acceptance() {
    let only = selected();
    let wanted = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));
    let run: OnceCell<TinyRun> = OnceCell::new();
    // Criterion 6 reuses the end-to-end model; alone it trains a short run.
    let tiny = || run.get_or_init(|| tiny_run(if wanted(9) { TINY_STEPS } else { 20 }));

    let mut failures = Vec::new();
    for n in 1..=10u32 {
        if !wanted(n) {
            continue;
        }
        let outcome = match n {
            1 => full_scale_config(),
            2 => coding_rate_gradient(),
            3 => coding_rate_closed_forms(),
            4 => ssim_suite(),
            5 => constrained_scaling(),
            6 => {
                let r = tiny();
                albedo_invariance(&r.weights, &format!("trained {} steps", r.steps))
            }
            7 => whdr_oracle_equivalence(),
            8 => color_correction(),
            9 => end_to_end(tiny()),
            10 => reproducibility(),
            _ => unreachable!(),
        };
        match outcome {
            Ok(detail) => println!("criterion {n:>2}: PASS  {detail}"),
            Err(detail) => {
                println!("criterion {n:>2}: FAIL  {detail}");
                failures.push(n);
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
