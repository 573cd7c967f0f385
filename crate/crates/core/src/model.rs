//! The relighting autoencoder.
//!
//! The encoder is a stack of residual convolution levels. The output of the
//! last block at every level below full resolution is L2-normalized along
//! channels and becomes one intrinsic feature map. A per-location MLP over
//! the bottleneck, averaged over space and normalized, gives the extrinsic
//! (lighting) code. The decoder walks back up, fusing each intrinsic level
//! through a 1×1 projection and modulating the fused map with
//!
//! ```text
//! F' = F ⊙ (1 + α · tanh(MLP(code)))
//! ```
//!
//! before the level's residual blocks. Setting `α = 0` removes the lighting
//! pathway entirely, which is how albedo estimates are produced.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::{images_to_tensor, tensor_to_image, ImageBuffer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_resolution: usize,
    pub blocks_per_level: Vec<usize>,
    pub channels_per_level: Vec<usize>,
    pub extrinsic_dim: usize,
    pub alpha: f64,
    pub injection_mlp_hidden: usize,
    pub extrinsic_head_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_resolution: 256,
            blocks_per_level: vec![1, 2, 2, 4, 4, 4],
            channels_per_level: vec![32, 64, 128, 128, 256, 512],
            extrinsic_dim: 16,
            alpha: 5e-3,
            injection_mlp_hidden: 256,
            extrinsic_head_hidden: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// 64-px, four-level configuration used for desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            base_resolution: 64,
            blocks_per_level: vec![1, 1, 1, 1],
            channels_per_level: vec![8, 16, 16, 32],
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channels_per_level.len()
    }

    /// Spatial size of level `i` (level 0 is full resolution).
    pub fn resolution(&self, level: usize) -> usize {
        self.base_resolution >> level
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.levels();
        if levels != self.blocks_per_level.len() {
            return Err(Error::Config(format!(
                "{} block counts for {} channel counts",
                self.blocks_per_level.len(),
                levels
            )));
        }
        if levels < 2 {
            return Err(Error::Config("need at least two resolution levels".into()));
        }
        if self.base_resolution == 0 || !self.base_resolution.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::Config(format!(
                "base resolution {} is not divisible by 2^{}",
                self.base_resolution,
                levels - 1
            )));
        }
        if self.channels_per_level.contains(&0) || self.blocks_per_level.contains(&0) {
            return Err(Error::Config("channel and block counts must be positive".into()));
        }
        if self.extrinsic_dim == 0 || self.injection_mlp_hidden == 0 || self.extrinsic_head_hidden == 0 {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Every parameter the architecture owns, in initialization order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let ch = &self.channels_per_level;
        let levels = self.levels();
        conv_spec(&mut specs, "encoder.stem", 3, ch[0], 3);
        let mut cin = ch[0];
        for (i, (&c, &blocks)) in ch.iter().zip(&self.blocks_per_level).enumerate() {
            if i > 0 {
                conv_spec(&mut specs, &format!("encoder.level{i}.down"), cin, cin, 3);
            }
            for j in 0..blocks {
                resblock_spec(&mut specs, &format!("encoder.level{i}.block{j}"), cin, c);
                cin = c;
            }
        }
        let hidden = self.extrinsic_head_hidden;
        conv_spec(&mut specs, "encoder.extrinsic.fc0", ch[levels - 1], hidden, 1);
        conv_spec(&mut specs, "encoder.extrinsic.fc1", hidden, hidden, 1);
        conv_spec(&mut specs, "encoder.extrinsic.fc2", hidden, self.extrinsic_dim, 1);

        for i in (0..levels).rev() {
            let fused_in = if i == levels - 1 {
                ch[i]
            } else if i >= 1 {
                ch[i + 1] + ch[i]
            } else {
                ch[1]
            };
            let p = format!("decoder.level{i}");
            conv_spec(&mut specs, &format!("{p}.proj"), fused_in, ch[i], 1);
            linear_spec(&mut specs, &format!("{p}.inject.fc0"), self.extrinsic_dim, self.injection_mlp_hidden);
            linear_spec(&mut specs, &format!("{p}.inject.fc1"), self.injection_mlp_hidden, ch[i]);
            for j in 0..self.blocks_per_level[i] {
                resblock_spec(&mut specs, &format!("{p}.block{j}"), ch[i], ch[i]);
            }
        }
        norm_spec(&mut specs, "decoder.out.norm", ch[0]);
        conv_spec(&mut specs, "decoder.out.conv", ch[0], 3, 3);
        if let Some(bias) = specs.iter_mut().find(|s| s.name == "decoder.out.conv.bias") {
            // Start predictions at mid-grey so the output clamp passes gradients.
            bias.init = Init::Constant(0.5);
        }
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn conv_spec(specs: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k;
    specs.push(ParamSpec { name: format!("{prefix}.weight"), shape: vec![cout, cin, k, k], init: Init::FanIn(fan_in) });
    specs.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![cout], init: Init::FanIn(fan_in) });
}

fn linear_spec(specs: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize) {
    specs.push(ParamSpec { name: format!("{prefix}.weight"), shape: vec![dout, din], init: Init::FanIn(din) });
    specs.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![dout], init: Init::FanIn(din) });
}

fn norm_spec(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    specs.push(ParamSpec { name: format!("{prefix}.gamma"), shape: vec![c], init: Init::Constant(1.0) });
    specs.push(ParamSpec { name: format!("{prefix}.beta"), shape: vec![c], init: Init::Constant(0.0) });
}

fn resblock_spec(specs: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize) {
    norm_spec(specs, &format!("{prefix}.norm1"), cin);
    conv_spec(specs, &format!("{prefix}.conv1"), cin, cout, 3);
    norm_spec(specs, &format!("{prefix}.norm2"), cout);
    conv_spec(specs, &format!("{prefix}.conv2"), cout, cout, 3);
    if cin != cout {
        conv_spec(specs, &format!("{prefix}.skip"), cin, cout, 1);
    }
}

/// Largest divisor of `channels` not exceeding 32.
pub fn group_count(channels: usize) -> usize {
    (1..=channels.min(32)).rev().find(|&g| channels.is_multiple_of(g)).unwrap_or(1)
}

/// Named parameter arrays of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    config: ModelConfig,
    params: BTreeMap<String, Tensor<T>>,
}

/// Deterministically initializes all parameters from `config.seed`.
pub fn init_model<T: Scalar>(config: &ModelConfig) -> Result<Weights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = BTreeMap::new();
    for spec in config.param_specs() {
        let t = match spec.init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_fn(&spec.shape, |_| T::lit(rng.random_range(-bound..bound)))
            }
            Init::Constant(v) => Tensor::full(&spec.shape, T::lit(v)),
        };
        params.insert(spec.name, t);
    }
    Ok(Weights { config: config.clone(), params })
}

impl<T: Scalar> Weights<T> {
    /// Assembles weights from named arrays, checking them against the
    /// architecture implied by `config`.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Config(format!("expected {} parameter arrays, got {}", specs.len(), params.len())));
        }
        for spec in &specs {
            let t = params
                .get(&spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!("{} has shape {:?}, expected {:?}", spec.name, t.shape(), spec.shape)));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(spec.name.clone()));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Weights<U> {
        Weights {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every array on `g`, as differentiable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn alpha(&self) -> T {
        T::lit(self.config.alpha)
    }

    /// Weights of the injection MLP feeding decoder level `level`.
    pub fn injection_head(&self, level: usize) -> Result<InjectionHead<T>> {
        let p = format!("decoder.level{level}.inject");
        let take = |s: &str| {
            self.params
                .get(&format!("{p}.{s}"))
                .cloned()
                .ok_or_else(|| Error::InvalidInput(format!("no injection head at level {level}")))
        };
        Ok(InjectionHead {
            fc0_weight: take("fc0.weight")?,
            fc0_bias: take("fc0.bias")?,
            fc1_weight: take("fc1.weight")?,
            fc1_bias: take("fc1.bias")?,
        })
    }

    pub fn encode(&self, image: &ImageBuffer<T>) -> Result<(IntrinsicFeatures<T>, ExtrinsicCode<T>)> {
        let mut out = self.encode_batch(&[image])?;
        Ok(out.pop().expect("one result per image"))
    }

    pub fn encode_batch(&self, images: &[&ImageBuffer<T>]) -> Result<Vec<(IntrinsicFeatures<T>, ExtrinsicCode<T>)>> {
        let res = self.config.base_resolution;
        for img in images {
            if img.height() != res || img.width() != res {
                return Err(Error::Shape(format!(
                    "encoder expects {res}x{res} input, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
        }
        let x = images_to_tensor(images)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let xv = g.constant(x);
        let enc = encode_graph(&mut g, &p, &self.config, xv);
        let mut results = Vec::with_capacity(images.len());
        for s in 0..images.len() {
            let levels = enc.intrinsics.iter().map(|&v| g.value(v).slice_batch(s, 1)).collect();
            let code = g.value(enc.code).slice_batch(s, 1).into_data();
            results.push((IntrinsicFeatures { levels }, ExtrinsicCode { code }));
        }
        Ok(results)
    }

    /// Decodes with the configured α, or `alpha_override` when given.
    pub fn decode(
        &self,
        intrinsics: &IntrinsicFeatures<T>,
        code: &ExtrinsicCode<T>,
        alpha_override: Option<T>,
    ) -> Result<ImageBuffer<T>> {
        self.check_intrinsics(intrinsics)?;
        if code.code.len() != self.config.extrinsic_dim {
            return Err(Error::Shape(format!(
                "extrinsic code has {} entries, model expects {}",
                code.code.len(),
                self.config.extrinsic_dim
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let levels: Vec<Var> = intrinsics.levels.iter().map(|t| g.constant(t.clone())).collect();
        let codev = g.constant(Tensor::new(&[1, code.code.len()], code.code.clone())?);
        let alpha = alpha_override.unwrap_or_else(|| self.alpha());
        let out = decode_graph(&mut g, &p, &self.config, &levels, codev, alpha);
        tensor_to_image(g.value(out), 0)
    }

    fn check_intrinsics(&self, intrinsics: &IntrinsicFeatures<T>) -> Result<()> {
        let expected = self.intrinsic_shapes();
        if intrinsics.levels.len() != expected.len() {
            return Err(Error::Shape(format!(
                "{} intrinsic levels, model expects {}",
                intrinsics.levels.len(),
                expected.len()
            )));
        }
        for (i, (t, shape)) in intrinsics.levels.iter().zip(&expected).enumerate() {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("intrinsic level {i}: {:?} vs expected {:?}", t.shape(), shape)));
            }
        }
        Ok(())
    }

    /// `[1, C, H, W]` shape of each intrinsic level, finest first.
    pub fn intrinsic_shapes(&self) -> Vec<Vec<usize>> {
        (1..self.config.levels())
            .map(|i| {
                let r = self.config.resolution(i);
                vec![1, self.config.channels_per_level[i], r, r]
            })
            .collect()
    }

    /// Decodes the image's own intrinsics with its own lighting code.
    pub fn reconstruct(&self, image: &ImageBuffer<T>) -> Result<ImageBuffer<T>> {
        let (s, l) = self.encode(image)?;
        self.decode(&s, &l, None)
    }

    /// Renders `input`'s scene under the lighting seen in `reference`.
    pub fn relight(&self, input: &ImageBuffer<T>, reference: &ImageBuffer<T>) -> Result<ImageBuffer<T>> {
        input.ensure_same_dims(reference)?;
        let (s, _) = self.encode(input)?;
        let (_, l) = self.encode(reference)?;
        self.decode(&s, &l, None)
    }

    /// Decodes with the lighting pathway disabled (`α = 0`).
    pub fn estimate_albedo(&self, image: &ImageBuffer<T>) -> Result<ImageBuffer<T>> {
        let (s, l) = self.encode(image)?;
        self.decode(&s, &l, Some(T::zero()))
    }
}

/// Name → graph variable map produced by [`Weights::bind`].
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Channel-normalized intrinsic maps, finest level first. Each level is a
/// `[1, C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicFeatures<T> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> IntrinsicFeatures<T> {
    /// Mean over levels of the average per-location channel-vector distance.
    pub fn distance(&self, other: &Self) -> Result<T> {
        if self.levels.len() != other.levels.len() || self.levels.is_empty() {
            return Err(Error::Shape("intrinsic level counts differ".into()));
        }
        let mut total = T::zero();
        for (a, b) in self.levels.iter().zip(&other.levels) {
            if a.shape() != b.shape() {
                return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let (_, c, h, w) = a.dims4();
            let plane = h * w;
            let mut acc = T::zero();
            for p in 0..plane {
                let mut d2 = T::zero();
                for ch in 0..c {
                    let diff = a.data()[ch * plane + p] - b.data()[ch * plane + p];
                    d2 += diff * diff;
                }
                acc += d2.sqrt();
            }
            total += acc / T::from_usize_lossy(plane);
        }
        Ok(total / T::from_usize_lossy(self.levels.len()))
    }
}

/// Unit-length lighting code.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtrinsicCode<T> {
    code: Vec<T>,
}

impl<T: Scalar> ExtrinsicCode<T> {
    /// Normalizes `v` to unit length.
    pub fn from_vec(v: Vec<T>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("extrinsic code".into()));
        }
        let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm == T::zero() {
            return Err(Error::InvalidInput("zero-length extrinsic code".into()));
        }
        Ok(Self { code: v.into_iter().map(|x| x / norm).collect() })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.code
    }

    pub fn dim(&self) -> usize {
        self.code.len()
    }

    pub fn norm(&self) -> T {
        self.code.iter().map(|&x| x * x).sum::<T>().sqrt()
    }
}

/// Normalized linear blend `(1 − t)·a + t·b`. The endpoints return the
/// inputs unchanged.
pub fn interpolate_extrinsics<T: Scalar>(a: &ExtrinsicCode<T>, b: &ExtrinsicCode<T>, t: T) -> Result<ExtrinsicCode<T>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("codes of length {} and {}", a.dim(), b.dim())));
    }
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::InvalidInput(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if t == T::zero() {
        return Ok(a.clone());
    }
    if t == T::one() {
        return Ok(b.clone());
    }
    let blend: Vec<T> = a.code.iter().zip(&b.code).map(|(&x, &y)| (T::one() - t) * x + t * y).collect();
    let norm = blend.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm <= T::epsilon() {
        return Err(Error::DegenerateInterpolation);
    }
    Ok(ExtrinsicCode { code: blend.into_iter().map(|x| x / norm).collect() })
}

/// Injection MLP weights for one decoder level.
#[derive(Clone, Debug)]
pub struct InjectionHead<T> {
    pub fc0_weight: Tensor<T>,
    pub fc0_bias: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
}

/// Range `[lo, hi]` of multipliers whose distance from one does not exceed
/// `alpha` in this floating-point type.
pub fn scaling_band<T: Scalar>(alpha: T) -> (T, T) {
    let one = T::one();
    let mut hi = one + alpha;
    while hi - one > alpha {
        hi = next_down(hi);
    }
    let mut lo = one - alpha;
    while one - lo > alpha {
        lo = next_up(lo);
    }
    (lo, hi)
}

fn next_down<T: Scalar>(x: T) -> T {
    // One ulp toward zero for positive normal x.
    let (mantissa, exponent, _) = x.integer_decode();
    let m = T::from_u64(mantissa).expect("mantissa");
    let e = T::from_i16(exponent).expect("exponent");
    let candidate = (m - T::one()) * T::lit(2.0).powf(e);
    if candidate < x { candidate } else { x - x * T::epsilon() }
}

fn next_up<T: Scalar>(x: T) -> T {
    let (mantissa, exponent, _) = x.integer_decode();
    let m = T::from_u64(mantissa).expect("mantissa");
    let e = T::from_i16(exponent).expect("exponent");
    (m + T::one()) * T::lit(2.0).powf(e)
}

/// Tensor-level constrained scaling of a `[C, H, W]` or `[1, C, H, W]` map.
pub fn constrained_scale<T: Scalar>(
    feature_map: &Tensor<T>,
    code: &ExtrinsicCode<T>,
    alpha: T,
    head: &InjectionHead<T>,
) -> Result<Tensor<T>> {
    if alpha.is_nan() || alpha < T::zero() {
        return Err(Error::InvalidInput(format!("alpha must be >= 0, got {alpha}")));
    }
    let f = match feature_map.ndim() {
        3 => {
            let s = feature_map.shape();
            feature_map.clone().reshape(&[1, s[0], s[1], s[2]])?
        }
        4 if feature_map.shape()[0] == 1 => feature_map.clone(),
        _ => return Err(Error::Shape(format!("feature map {:?}", feature_map.shape()))),
    };
    let channels = f.shape()[1];
    let hidden = head.fc0_weight.shape().first().copied().unwrap_or(0);
    if head.fc0_weight.shape() != [hidden, code.dim()]
        || head.fc0_bias.shape() != [hidden]
        || head.fc1_weight.shape() != [channels, hidden]
        || head.fc1_bias.shape() != [channels]
    {
        return Err(Error::Shape(format!(
            "injection head maps {} -> {:?}, feature map has {channels} channels",
            code.dim(),
            head.fc1_weight.shape().first()
        )));
    }
    let mut g = Graph::new();
    let fv = g.constant(f);
    let cv = g.constant(Tensor::new(&[1, code.dim()], code.code.clone())?);
    let vars = [
        g.constant(head.fc0_weight.clone()),
        g.constant(head.fc0_bias.clone()),
        g.constant(head.fc1_weight.clone()),
        g.constant(head.fc1_bias.clone()),
    ];
    let out = constrained_scale_graph(&mut g, fv, cv, alpha, vars);
    g.value(out).clone().reshape(feature_map.shape())
}

/// `F ⊙ clamp(1 + α·tanh(MLP(code)))` on the graph; `head` is
/// `[fc0.weight, fc0.bias, fc1.weight, fc1.bias]`.
pub fn constrained_scale_graph<T: Scalar>(g: &mut Graph<T>, f: Var, code: Var, alpha: T, head: [Var; 4]) -> Var {
    let h = g.linear(code, head[0], Some(head[1]));
    let h = g.silu(h);
    let m = g.linear(h, head[2], Some(head[3]));
    let t = g.tanh(m);
    let s = g.mul_scalar(t, alpha);
    let s = g.add_scalar(s, T::one());
    let (lo, hi) = scaling_band(alpha);
    let s = g.clamp(s, lo, hi);
    g.scale_channels(f, s)
}

/// Graph outputs of the encoder for a batch.
pub struct EncodedVars {
    /// `[N, C_i, H_i, W_i]` normalized maps, finest first.
    pub intrinsics: Vec<Var>,
    /// `[N, extrinsic_dim]` unit codes.
    pub code: Var,
}

fn conv<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = p.var(&format!("{prefix}.weight"));
    let b = p.var(&format!("{prefix}.bias"));
    g.conv2d(x, w, Some(b), stride, pad)
}

fn norm_act<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var) -> Var {
    let c = g.value(x).shape()[1];
    let gamma = p.var(&format!("{prefix}.gamma"));
    let beta = p.var(&format!("{prefix}.beta"));
    let y = g.group_norm(x, gamma, beta, group_count(c), T::lit(GROUP_NORM_EPS));
    g.silu(y)
}

fn resblock<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, prefix: &str, x: Var, cin: usize, cout: usize) -> Var {
    let h = norm_act(g, p, &format!("{prefix}.norm1"), x);
    let h = conv(g, p, &format!("{prefix}.conv1"), h, 1, 1);
    let h = norm_act(g, p, &format!("{prefix}.norm2"), h);
    let h = conv(g, p, &format!("{prefix}.conv2"), h, 1, 1);
    let skip = if cin != cout { conv(g, p, &format!("{prefix}.skip"), x, 1, 0) } else { x };
    g.add(skip, h)
}

/// Encoder forward pass over a `[N, 3, R, R]` batch.
pub fn encode_graph<T: Scalar>(g: &mut Graph<T>, p: &ParamVars, cfg: &ModelConfig, images: Var) -> EncodedVars {
    let ch = &cfg.channels_per_level;
    let mut h = conv(g, p, "encoder.stem", images, 1, 1);
    let mut cin = ch[0];
    let mut intrinsics = Vec::with_capacity(cfg.levels() - 1);
    for (i, (&c, &blocks)) in ch.iter().zip(&cfg.blocks_per_level).enumerate() {
        if i > 0 {
            h = conv(g, p, &format!("encoder.level{i}.down"), h, 2, 1);
        }
        for j in 0..blocks {
            h = resblock(g, p, &format!("encoder.level{i}.block{j}"), h, cin, c);
            cin = c;
        }
        if i > 0 {
            intrinsics.push(g.normalize_channels(h));
        }
    }
    let e = conv(g, p, "encoder.extrinsic.fc0", h, 1, 0);
    let e = g.silu(e);
    let e = conv(g, p, "encoder.extrinsic.fc1", e, 1, 0);
    let e = g.silu(e);
    let e = conv(g, p, "encoder.extrinsic.fc2", e, 1, 0);
    let e = g.mean_spatial(e);
    let code = g.normalize_channels(e);
    EncodedVars { intrinsics, code }
}

/// Decoder forward pass. `intrinsics` are finest first; the output is
/// clamped to `[0, 1]`.
pub fn decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamVars,
    cfg: &ModelConfig,
    intrinsics: &[Var],
    code: Var,
    alpha: T,
) -> Var {
    let levels = cfg.levels();
    assert_eq!(intrinsics.len(), levels - 1, "decoder needs one map per intrinsic level");
    let ch = &cfg.channels_per_level;
    let mut x = intrinsics[levels - 2];
    for i in (0..levels).rev() {
        let prefix = format!("decoder.level{i}");
        let fused = if i == levels - 1 {
            x
        } else {
            let up = g.upsample2x(x);
            if i >= 1 {
                g.concat_channels(&[up, intrinsics[i - 1]])
            } else {
                up
            }
        };
        x = conv(g, p, &format!("{prefix}.proj"), fused, 1, 0);
        let head = ["fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"].map(|s| p.var(&format!("{prefix}.inject.{s}")));
        x = constrained_scale_graph(g, x, code, alpha, head);
        for j in 0..cfg.blocks_per_level[i] {
            x = resblock(g, p, &format!("{prefix}.block{j}"), x, ch[i], ch[i]);
        }
    }
    let y = norm_act(g, p, "decoder.out.norm", x);
    let y = conv(g, p, "decoder.out.conv", y, 1, 1);
    g.clamp(y, T::zero(), T::one())
}
