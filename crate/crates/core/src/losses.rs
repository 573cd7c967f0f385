//! Training objective.
//!
//! Pixel terms compare decoded images with clean targets. The coding rate
//! `R(S) = log det(I + d/(n·λ²)·SᵀS)` of a row-normalized feature matrix
//! measures how spread its rows are; the uniformity regularizer pulls it
//! toward the rate of an equally shaped matrix with rows drawn uniformly on
//! the unit sphere.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, ImageBuffer};
use crate::model::IntrinsicFeatures;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_l2: f64,
    pub w_ssim: f64,
    pub w_grad: f64,
    pub w_intrinsic: f64,
    pub w_intrinsic_reg: f64,
    pub w_extrinsic: f64,
    pub lambda_distortion: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_l2: 10.0,
            w_ssim: 0.1,
            w_grad: 1.0,
            w_intrinsic: 1e-1,
            w_intrinsic_reg: 1e-3,
            w_extrinsic: 1e-4,
            lambda_distortion: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_l2, self.w_ssim, self.w_grad, self.w_intrinsic, self.w_intrinsic_reg, self.w_extrinsic];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        if !(self.lambda_distortion.is_finite() && self.lambda_distortion > 0.0) {
            return Err(Error::Config("lambda_distortion must be > 0".into()));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_kernel<T: Scalar>(size: usize, sigma: f64) -> Vec<T> {
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / total)).collect()
}

/// Mean SSIM over all samples, channels and pixels of two `[N, C, H, W]` batches.
///
/// Local statistics use an 11-tap Gaussian (σ = 1.5) with replicated edges,
/// so every pixel contributes a full window.
pub fn ssim_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let k = gaussian_kernel::<T>(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (T::lit(SSIM_C1), T::lit(SSIM_C2));
    let two = T::lit(2.0);
    let mu_a = g.blur(a, &k);
    let mu_b = g.blur(b, &k);
    let aa = g.mul(a, a);
    let bb = g.mul(b, b);
    let ab = g.mul(a, b);
    let e_aa = g.blur(aa, &k);
    let e_bb = g.blur(bb, &k);
    let e_ab = g.blur(ab, &k);
    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_aa);
    let var_b = g.sub(e_bb, mu_bb);
    let cov = g.sub(e_ab, mu_ab);

    let n1 = g.mul_scalar(mu_ab, two);
    let n1 = g.add_scalar(n1, c1);
    let n2 = g.mul_scalar(cov, two);
    let n2 = g.add_scalar(n2, c2);
    let num = g.mul(n1, n2);
    let d1 = g.add(mu_aa, mu_bb);
    let d1 = g.add_scalar(d1, c1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.add_scalar(d2, c2);
    let den = g.mul(d1, d2);
    let map = g.div(num, den);
    g.mean(map)
}

pub fn ssim<T: Scalar>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<T> {
    a.ensure_same_dims(b)?;
    let mut g = Graph::new();
    let av = g.constant(images_to_tensor(&[a])?);
    let bv = g.constant(images_to_tensor(&[b])?);
    let s = ssim_graph(&mut g, av, bv);
    Ok(g.value(s).item())
}

/// `w_l2·MSE + w_ssim·(1 − SSIM) + w_grad·(MSE of ∂x + MSE of ∂y)`.
pub fn pixel_loss_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var, w: &LossWeights) -> Var {
    let d = g.sub(pred, target);
    let sq = g.mul(d, d);
    let mse = g.mean(sq);
    let l2 = g.mul_scalar(mse, T::lit(w.w_l2));

    let s = ssim_graph(g, pred, target);
    let s = g.mul_scalar(s, T::lit(-w.w_ssim));
    let ssim_term = g.add_scalar(s, T::lit(w.w_ssim));

    let gx = g.diff_x(d);
    let gy = g.diff_y(d);
    let gx2 = g.mul(gx, gx);
    let gy2 = g.mul(gy, gy);
    let mx = g.mean(gx2);
    let my = g.mean(gy2);
    let grad = g.add(mx, my);
    let grad = g.mul_scalar(grad, T::lit(w.w_grad));

    let total = g.add(l2, ssim_term);
    g.add(total, grad)
}

pub fn pixel_loss<T: Scalar>(pred: &ImageBuffer<T>, target: &ImageBuffer<T>, w: &LossWeights) -> Result<T> {
    pred.ensure_same_dims(target)?;
    let mut g = Graph::new();
    let p = g.constant(images_to_tensor(&[pred])?);
    let t = g.constant(images_to_tensor(&[target])?);
    let l = pixel_loss_graph(&mut g, p, t, w);
    Ok(g.value(l).item())
}

fn coding_rate_coef<T: Scalar>(n: usize, d: usize, lambda: f64) -> T {
    T::lit(d as f64 / (n as f64 * lambda * lambda))
}

/// Coding rate of an `n × d` matrix on the graph.
pub fn coding_rate_graph<T: Scalar>(g: &mut Graph<T>, s: Var, lambda: f64) -> Var {
    let shape = g.value(s).shape().to_vec();
    g.coding_rate(s, coding_rate_coef(shape[0], shape[1], lambda))
}

fn check_matrix<T: Scalar>(s: &Tensor<T>, lambda: f64) -> Result<()> {
    if s.ndim() != 2 || s.shape()[0] == 0 || s.shape()[1] == 0 {
        return Err(Error::Shape(format!("coding rate needs a non-empty matrix, got {:?}", s.shape())));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("coding-rate input".into()));
    }
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(())
}

/// `log det(I_d + d/(n·λ²)·SᵀS)`, via a Cholesky factorization.
pub fn coding_rate<T: Scalar>(s: &Tensor<T>, lambda: f64) -> Result<T> {
    Ok(coding_rate_with_grad(s, lambda, false)?.0)
}

/// Coding rate and, when requested, its gradient with respect to `s`.
pub fn coding_rate_with_grad<T: Scalar>(s: &Tensor<T>, lambda: f64, grad: bool) -> Result<(T, Option<Tensor<T>>)> {
    check_matrix(s, lambda)?;
    let mut g = Graph::new();
    let v = if grad { g.param(s.clone()) } else { g.constant(s.clone()) };
    let r = coding_rate_graph(&mut g, v, lambda);
    let value = g.value(r).item();
    let gradient = grad.then(|| g.backward(r).take(v).expect("gradient of coding rate"));
    Ok((value, gradient))
}

/// Cached coding rates of hyperspherical-uniform reference matrices, one
/// per `(rows, cols)` shape.
///
/// Each shape's sample comes from its own stream derived from `seed`, so the
/// cached value does not depend on the order in which shapes are requested.
#[derive(Clone, Debug)]
pub struct UniformityTarget<T> {
    seed: u64,
    lambda: f64,
    samples: BTreeMap<(usize, usize), (Tensor<T>, T)>,
}

impl<T: Scalar> UniformityTarget<T> {
    pub fn new(seed: u64, lambda: f64) -> Self {
        Self { seed, lambda, samples: BTreeMap::new() }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    fn ensure(&mut self, n: usize, d: usize) -> Result<&(Tensor<T>, T)> {
        if n < 1 || d < 1 {
            return Err(Error::Shape(format!("uniformity target for {n}x{d}")));
        }
        if !self.samples.contains_key(&(n, d)) {
            let stream = (n as u64) << 32 | d as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                data.extend(row.iter().map(|v| T::lit(v / norm)));
            }
            let sample = Tensor::new(&[n, d], data)?;
            let rate = coding_rate(&sample, self.lambda)?;
            if !rate.is_finite() {
                return Err(Error::NonFinite("uniformity target".into()));
            }
            self.samples.insert((n, d), (sample, rate));
        }
        Ok(&self.samples[&(n, d)])
    }

    /// `R(Ŝ)` for the given shape, sampled on first request.
    pub fn rate(&mut self, n: usize, d: usize) -> Result<T> {
        Ok(self.ensure(n, d)?.1)
    }

    /// The reference matrix `Ŝ` for the given shape.
    pub fn sample(&mut self, n: usize, d: usize) -> Result<&Tensor<T>> {
        Ok(&self.ensure(n, d)?.0)
    }
}

/// `|R(S) − R(Ŝ)|` on the graph.
pub fn uniformity_reg_graph<T: Scalar>(g: &mut Graph<T>, s: Var, target: &mut UniformityTarget<T>) -> Result<Var> {
    let shape = g.value(s).shape().to_vec();
    let reference = target.rate(shape[0], shape[1])?;
    let r = coding_rate_graph(g, s, target.lambda);
    let diff = g.add_scalar(r, -reference);
    Ok(g.abs(diff))
}

pub fn uniformity_reg<T: Scalar>(s: &Tensor<T>, target: &mut UniformityTarget<T>) -> Result<T> {
    check_matrix(s, target.lambda)?;
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let r = uniformity_reg_graph(&mut g, v, target)?;
    Ok(g.value(r).item())
}

/// Graph nodes of the unweighted intrinsic terms, summed over levels.
pub struct IntrinsicTerms {
    /// Mean per-location channel-vector distance between the two sides.
    pub distance: Var,
    /// Uniformity regularizer on side `a`, averaged over samples.
    pub regularizer: Var,
}

/// Intrinsic consistency terms for batched maps (`[B, C, H, W]` per level).
pub fn intrinsic_terms_graph<T: Scalar>(
    g: &mut Graph<T>,
    a: &[Var],
    b: &[Var],
    target: &mut UniformityTarget<T>,
) -> Result<IntrinsicTerms> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("intrinsic level counts {} and {}", a.len(), b.len())));
    }
    let mut distance: Option<Var> = None;
    let mut regularizer: Option<Var> = None;
    for (&la, &lb) in a.iter().zip(b) {
        if g.value(la).shape() != g.value(lb).shape() {
            return Err(Error::Shape(format!("{:?} vs {:?}", g.value(la).shape(), g.value(lb).shape())));
        }
        let d = g.sub(la, lb);
        let n = g.channel_norm(d);
        let dist = g.mean(n);
        distance = Some(match distance {
            Some(acc) => g.add(acc, dist),
            None => dist,
        });
        let batch = g.value(la).shape()[0];
        let mut level_reg: Option<Var> = None;
        for s in 0..batch {
            let rows = g.spatial_rows(la, s);
            let r = uniformity_reg_graph(g, rows, target)?;
            level_reg = Some(match level_reg {
                Some(acc) => g.add(acc, r),
                None => r,
            });
        }
        let level_reg = g.mul_scalar(level_reg.expect("batch is non-empty"), T::one() / T::from_usize_lossy(batch));
        regularizer = Some(match regularizer {
            Some(acc) => g.add(acc, level_reg),
            None => level_reg,
        });
    }
    Ok(IntrinsicTerms { distance: distance.expect("levels"), regularizer: regularizer.expect("levels") })
}

/// `Σ_i dist(Sᵃ_i, Sᵇ_i) + w_intrinsic_reg · Σ_i reg(Sᵃ_i)` for one pair.
pub fn intrinsic_loss<T: Scalar>(
    a: &IntrinsicFeatures<T>,
    b: &IntrinsicFeatures<T>,
    target: &mut UniformityTarget<T>,
    w: &LossWeights,
) -> Result<T> {
    let mut g = Graph::new();
    let av: Vec<Var> = a.levels.iter().map(|t| g.constant(t.clone())).collect();
    let bv: Vec<Var> = b.levels.iter().map(|t| g.constant(t.clone())).collect();
    let terms = intrinsic_terms_graph(&mut g, &av, &bv, target)?;
    Ok(g.value(terms.distance).item() + T::lit(w.w_intrinsic_reg) * g.value(terms.regularizer).item())
}

/// Weighted loss terms; [`LossTerms::total`] is their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<V> {
    pub relight: V,
    pub reconstruction: V,
    pub intrinsic_distance: V,
    pub intrinsic_reg: V,
    pub extrinsic_reg: V,
    pub total: V,
}

/// Per-term values of one loss evaluation, already multiplied by their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub relight: f64,
    pub reconstruction: f64,
    pub intrinsic_distance: f64,
    pub intrinsic_reg: f64,
    pub extrinsic_reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("relight", self.relight),
            ("reconstruction", self.reconstruction),
            ("intrinsic_distance", self.intrinsic_distance),
            ("intrinsic_reg", self.intrinsic_reg),
            ("extrinsic_reg", self.extrinsic_reg),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms().iter().all(|(_, v)| v.is_finite())
    }

    pub fn pixel(&self) -> f64 {
        self.relight + self.reconstruction
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (name, v) in self.terms() {
            write!(f, "{name}={v:.6e} ")?;
        }
        write!(f, "total={:.6e}", self.total)
    }
}

impl LossTerms<Var> {
    pub fn evaluate<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let v = |x: Var| g.value(x).item().to_f64_lossy();
        LossBreakdown {
            relight: v(self.relight),
            reconstruction: v(self.reconstruction),
            intrinsic_distance: v(self.intrinsic_distance),
            intrinsic_reg: v(self.intrinsic_reg),
            extrinsic_reg: v(self.extrinsic_reg),
            total: v(self.total),
        }
    }
}

/// Graph handles of everything the objective consumes for a batch of pairs.
pub struct BatchVars<'a> {
    /// Relit predictions `Ĩ^{l1→l2}`, `[B, 3, H, W]`.
    pub relit: Var,
    /// Reconstructions `Ĩ^{l2→l2}`, `[B, 3, H, W]`.
    pub reconstruction: Var,
    /// Clean targets `I^{l2}`, `[B, 3, H, W]`.
    pub target: Var,
    pub intrinsics_a: &'a [Var],
    pub intrinsics_b: &'a [Var],
    /// Batch of unit extrinsic codes, `[M, extrinsic_dim]`.
    pub codes: Var,
}

/// Builds the full weighted objective on the graph.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    batch: &BatchVars<'_>,
    target: &mut UniformityTarget<T>,
    w: &LossWeights,
) -> Result<LossTerms<Var>> {
    let relight = pixel_loss_graph(g, batch.relit, batch.target, w);
    let reconstruction = pixel_loss_graph(g, batch.reconstruction, batch.target, w);
    let terms = intrinsic_terms_graph(g, batch.intrinsics_a, batch.intrinsics_b, target)?;
    let intrinsic_distance = g.mul_scalar(terms.distance, T::lit(w.w_intrinsic));
    let intrinsic_reg = g.mul_scalar(terms.regularizer, T::lit(w.w_intrinsic * w.w_intrinsic_reg));
    let ext = uniformity_reg_graph(g, batch.codes, target)?;
    let extrinsic_reg = g.mul_scalar(ext, T::lit(w.w_extrinsic));
    let total = g.add(relight, reconstruction);
    let total = g.add(total, intrinsic_distance);
    let total = g.add(total, intrinsic_reg);
    let total = g.add(total, extrinsic_reg);
    Ok(LossTerms { relight, reconstruction, intrinsic_distance, intrinsic_reg, extrinsic_reg, total })
}

/// Tensor-valued counterpart of [`BatchVars`].
#[derive(Clone, Debug, Default)]
pub struct BatchOutputs<T> {
    pub relit: Option<Tensor<T>>,
    pub reconstruction: Option<Tensor<T>>,
    pub target: Option<Tensor<T>>,
    pub intrinsics_a: Vec<Tensor<T>>,
    pub intrinsics_b: Vec<Tensor<T>>,
    pub codes: Option<Tensor<T>>,
}

/// Evaluates the weighted objective on precomputed outputs.
pub fn total_loss<T: Scalar>(
    batch: &BatchOutputs<T>,
    target: &mut UniformityTarget<T>,
    w: &LossWeights,
) -> Result<(T, LossBreakdown)> {
    w.validate()?;
    let missing = |what: &str| Error::InvalidInput(format!("loss input is missing {what}"));
    let relit = batch.relit.as_ref().ok_or_else(|| missing("relit images"))?;
    let recon = batch.reconstruction.as_ref().ok_or_else(|| missing("reconstructions"))?;
    let tgt = batch.target.as_ref().ok_or_else(|| missing("targets"))?;
    let codes = batch.codes.as_ref().ok_or_else(|| missing("extrinsic codes"))?;
    if batch.intrinsics_a.is_empty() || batch.intrinsics_b.is_empty() {
        return Err(missing("intrinsic features"));
    }
    if relit.shape() != tgt.shape() || recon.shape() != tgt.shape() || tgt.ndim() != 4 {
        return Err(Error::Shape(format!("prediction/target shapes {:?} {:?} {:?}", relit.shape(), recon.shape(), tgt.shape())));
    }
    if codes.ndim() != 2 {
        return Err(Error::Shape(format!("codes must be a matrix, got {:?}", codes.shape())));
    }
    for t in batch.intrinsics_a.iter().chain(&batch.intrinsics_b) {
        if t.ndim() != 4 {
            return Err(Error::Shape(format!("intrinsic level {:?}", t.shape())));
        }
    }
    let mut g = Graph::new();
    let vars = BatchVars {
        relit: g.constant(relit.clone()),
        reconstruction: g.constant(recon.clone()),
        target: g.constant(tgt.clone()),
        intrinsics_a: &batch.intrinsics_a.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>(),
        intrinsics_b: &batch.intrinsics_b.iter().map(|t| g.constant(t.clone())).collect::<Vec<_>>(),
        codes: g.constant(codes.clone()),
    };
    let terms = total_loss_graph(&mut g, &vars, target, w)?;
    Ok((g.value(terms.total).item(), terms.evaluate(&g)))
}
