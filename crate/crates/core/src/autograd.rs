//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Shape violations inside the graph are
//! programming errors and panic; public entry points validate their inputs
//! before building nodes.

use crate::scalar::{dot, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Abs(Var),
    Silu(Var),
    Tanh(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    NormalizeChannels { x: Var, norms: Vec<T> },
    ChannelNorm(Var),
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceBatch { x: Var, start: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    MeanSpatial(Var),
    ScaleChannels { f: Var, s: Var },
    Blur { x: Var, kernel: Vec<T> },
    DiffX(Var),
    DiffY(Var),
    SpatialRows { x: Var, sample: usize },
    CodingRate { s: Var, coef: T, inverse: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation tape. Build values with the op methods, then call
/// [`Graph::backward`] on a scalar output.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input (parameters).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, what: &str) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data).expect("shape");
        let rg = self.rg(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::MulScalar(a, c), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs());
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.tanh());
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(&[a]);
        self.push(value, Op::Clamp { x: a, lo, hi }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / T::from_usize_lossy(v.numel()));
        let rg = self.rg(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Square-kernel 2-D convolution with zero padding. `w` is `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let (cout, wcin, k, k2) = self.value(w).dims4();
        assert_eq!(cin, wcin, "conv2d: input has {cin} channels, kernel expects {wcin}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        if let Some(b) = b {
            assert_eq!(self.value(b).shape(), &[cout], "conv2d: bias shape");
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeo { cin, h, w: wd, k, stride, pad, ho, wo };
        let mut out = vec![T::zero(); n * cout * ho * wo];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let kk = cin * k * k;
        let plane = ho * wo;
        let mut col = vec![T::zero(); if geo.is_pointwise() { 0 } else { kk * plane }];
        for s in 0..n {
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let src: &[T] = if geo.is_pointwise() {
                xs
            } else {
                im2col(xs, &geo, &mut col);
                &col
            };
            let os = &mut out[s * cout * plane..(s + 1) * cout * plane];
            T::gemm(cout, kk, plane, T::one(), wv, kk as isize, 1, src, plane as isize, 1, T::zero(), os, plane as isize, 1);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bias = bv[i % cout];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(&[n, cout, ho, wo], out).expect("shape");
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let cpg = c / groups;
        let span = cpg * h * w;
        let count = T::from_usize_lossy(span);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        for (gi, (src, dst)) in xv.chunks(span).zip(out.chunks_mut(span)).enumerate() {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let rstd = T::one() / (var + eps).sqrt();
            let g0 = (gi % groups) * cpg;
            for (ci, (s, d)) in src.chunks(h * w).zip(dst.chunks_mut(h * w)).enumerate() {
                let scale = gv[g0 + ci] * rstd;
                let shift = bv[g0 + ci] - mean * scale;
                for (o, &i) in d.iter_mut().zip(s) {
                    *o = i * scale + shift;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(&[n, c, h, w], out).expect("shape");
        let rg = self.rg(&[x, gamma, beta]);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, rg)
    }

    /// Unit-L2-normalizes along axis 1 (channels of `[N, C, H, W]`, or the
    /// row of an `[N, C]` matrix).
    pub fn normalize_channels(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, inner) = axis1_layout(v.shape());
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(n * inner);
        let tiny = T::lit(1e-12);
        for s in 0..n {
            for p in 0..inner {
                let base = s * c * inner + p;
                let mut acc = T::zero();
                for ch in 0..c {
                    let e = out[base + ch * inner];
                    acc += e * e;
                }
                let norm = acc.sqrt().max(tiny);
                for ch in 0..c {
                    out[base + ch * inner] /= norm;
                }
                norms.push(norm);
            }
        }
        let value = Tensor::new(v.shape(), out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::NormalizeChannels { x, norms }, rg)
    }

    /// Per-location L2 norm over channels: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let inner = h * w;
        let d = v.data();
        let mut out = vec![T::zero(); n * inner];
        for s in 0..n {
            for p in 0..inner {
                let mut acc = T::zero();
                for ch in 0..c {
                    let e = d[(s * c + ch) * inner + p];
                    acc += e * e;
                }
                out[s * inner + p] = acc.sqrt();
            }
        }
        let value = Tensor::new(&[n, 1, h, w], out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::ChannelNorm(x), rg)
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let d = v.data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &d[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                let row = &src[(y / 2) * w..(y / 2 + 1) * w];
                for (xo, o) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *o = row[xo / 2];
                }
            }
        }
        let value = Tensor::new(&[n, c, h2, w2], out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Upsample2x(x), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut ctot = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels: mismatched parts");
            ctot += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * ctot * plane);
        for s in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                out.extend_from_slice(&v.data()[s * pc * plane..(s + 1) * pc * plane]);
            }
        }
        let value = Tensor::new(&[n, ctot, h, w], out).expect("shape");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatChannels(parts.to_vec()), rg)
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::stack(&tensors).expect("concat_batch: mismatched parts");
        let rg = self.rg(parts);
        self.push(value, Op::ConcatBatch(parts.to_vec()), rg)
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= self.value(x).shape()[0], "slice_batch out of range");
        let value = self.value(x).slice_batch(start, len);
        let rg = self.rg(&[x]);
        self.push(value, Op::SliceBatch { x, start }, rg)
    }

    /// `x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear: {xs:?} x {ws:?}");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            assert_eq!(self.value(b).shape(), &[dout]);
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(n, din, dout, T::one(), self.value(x).data(), din as isize, 1, self.value(w).data(), 1, din as isize, beta, &mut out, dout as isize, 1);
        let value = Tensor::new(&[n, dout], out).expect("shape");
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(value, Op::Linear { x, w, b }, rg)
    }

    /// `[N, C, H, W] -> [N, C]` average over spatial positions.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let count = T::from_usize_lossy(h * w);
        let out = v.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / count).collect();
        let value = Tensor::new(&[n, c], out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::MeanSpatial(x), rg)
    }

    /// Broadcast multiply of `f: [N, C, H, W]` by per-channel factors `s: [N, C]`.
    pub fn scale_channels(&mut self, f: Var, s: Var) -> Var {
        let (n, c, h, w) = self.value(f).dims4();
        assert_eq!(self.value(s).shape(), &[n, c], "scale_channels: factor shape");
        let sv = self.value(s).data();
        let mut out = self.value(f).data().to_vec();
        for (plane, chunk) in out.chunks_mut(h * w).enumerate() {
            let k = sv[plane];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let value = Tensor::new(&[n, c, h, w], out).expect("shape");
        let rg = self.rg(&[f, s]);
        self.push(value, Op::ScaleChannels { f, s }, rg)
    }

    /// Separable blur with an odd-length 1-D kernel, replicating edge pixels.
    pub fn blur(&mut self, x: Var, kernel: &[T]) -> Var {
        assert!(kernel.len() % 2 == 1, "blur kernel must have odd length");
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        let mut tmp = vec![T::zero(); v.numel()];
        let mut out = vec![T::zero(); v.numel()];
        for p in 0..n * c {
            let r = p * h * w..(p + 1) * h * w;
            blur_rows(&v.data()[r.clone()], &mut tmp[r.clone()], h, w, kernel, false);
            blur_cols(&tmp[r.clone()], &mut out[r], h, w, kernel, false);
        }
        let value = Tensor::new(&[n, c, h, w], out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Blur { x, kernel: kernel.to_vec() }, rg)
    }

    /// Forward difference along x; the last column is zero.
    pub fn diff_x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, _, _, w) = v.dims4();
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for (src, dst) in d.chunks(w).zip(out.chunks_mut(w)) {
            for i in 0..w.saturating_sub(1) {
                dst[i] = src[i + 1] - src[i];
            }
        }
        let value = Tensor::new(v.shape(), out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::DiffX(x), rg)
    }

    /// Forward difference along y; the last row is zero.
    pub fn diff_y(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, _, h, w) = v.dims4();
        let d = v.data();
        let mut out = vec![T::zero(); d.len()];
        for (src, dst) in d.chunks(h * w).zip(out.chunks_mut(h * w)) {
            for i in 0..(h.saturating_sub(1)) * w {
                dst[i] = src[i + w] - src[i];
            }
        }
        let value = Tensor::new(v.shape(), out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::DiffY(x), rg)
    }

    /// One sample of a `[N, C, H, W]` map laid out as an `(H·W) × C` row matrix.
    pub fn spatial_rows(&mut self, x: Var, sample: usize) -> Var {
        let v = self.value(x);
        let (n, c, h, w) = v.dims4();
        assert!(sample < n);
        let inner = h * w;
        let src = &v.data()[sample * c * inner..(sample + 1) * c * inner];
        let mut out = vec![T::zero(); inner * c];
        for ch in 0..c {
            for p in 0..inner {
                out[p * c + ch] = src[ch * inner + p];
            }
        }
        let value = Tensor::new(&[inner, c], out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::SpatialRows { x, sample }, rg)
    }

    /// `log det(I + coef · SᵀS)` for an `n × d` matrix `s`.
    pub fn coding_rate(&mut self, s: Var, coef: T) -> Var {
        let v = self.value(s);
        assert_eq!(v.ndim(), 2, "coding_rate expects a matrix");
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let mut m = vec![T::zero(); d * d];
        T::gemm(d, n, d, coef, v.data(), 1, d as isize, v.data(), d as isize, 1, T::zero(), &mut m, d as isize, 1);
        for i in 0..d {
            m[i * d + i] += T::one();
        }
        let rg = self.rg(&[s]);
        // Only non-finite inputs break positive definiteness; propagate NaN.
        let (logdet, inverse) = match cholesky(&m, d) {
            Some(chol) => {
                let logdet = T::lit(2.0) * (0..d).map(|i| chol[i * d + i].ln()).sum::<T>();
                (logdet, if rg { cholesky_inverse(&chol, d) } else { Vec::new() })
            }
            None => (T::nan(), if rg { vec![T::nan(); d * d] } else { Vec::new() }),
        };
        self.push(Tensor::scalar(logdet), Op::CodingRate { s, coef, inverse }, rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let shape = g.shape();
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>| accumulate(grads, v, t);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.give(grads, *a, || g.clone());
                self.give(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.give(grads, *a, || g.clone());
                self.give(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.give(grads, *a, || zip_map(shape, gd, vb, |g, y| g * y));
                self.give(grads, *b, || zip_map(shape, gd, va, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.give(grads, *a, || zip_map(shape, gd, vb, |g, y| g / y));
                self.give(grads, *b, || {
                    let data = gd.iter().zip(va).zip(vb).map(|((&g, &x), &y)| -g * x / (y * y)).collect();
                    Tensor::new(shape, data).expect("shape")
                });
            }
            Op::AddScalar(a) => self.give(grads, *a, || g.clone()),
            Op::MulScalar(a, c) => self.give(grads, *a, || g.map(|v| v * *c)),
            Op::Abs(a) => {
                let va = self.value(*a).data();
                self.give(grads, *a, || {
                    zip_map(shape, gd, va, |g, x| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                });
            }
            Op::Silu(a) => {
                let va = self.value(*a).data();
                self.give(grads, *a, || {
                    zip_map(shape, gd, va, |g, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * s * (T::one() + x * (T::one() - s))
                    })
                });
            }
            Op::Tanh(a) => {
                let out = node.value.data();
                self.give(grads, *a, || zip_map(shape, gd, out, |g, y| g * (T::one() - y * y)));
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                self.give(grads, *x, || zip_map(shape, gd, vx, |g, v| if v >= lo && v <= hi { g } else { T::zero() }));
            }
            Op::Sum(a) => {
                let gv = gd[0];
                self.give(grads, *a, || Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let gv = gd[0] / T::from_usize_lossy(va.numel());
                self.give(grads, *a, || Tensor::full(va.shape(), gv));
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                self.group_norm_backward(*x, *gamma, *beta, *groups, mean, rstd, g, grads)
            }
            Op::NormalizeChannels { x, norms } => {
                let y = node.value.data();
                let (n, c, inner) = axis1_layout(shape);
                self.give(grads, *x, || {
                    let mut out = vec![T::zero(); y.len()];
                    for s in 0..n {
                        for p in 0..inner {
                            let base = s * c * inner + p;
                            let mut dot = T::zero();
                            for ch in 0..c {
                                dot += y[base + ch * inner] * gd[base + ch * inner];
                            }
                            let norm = norms[s * inner + p];
                            for ch in 0..c {
                                let i = base + ch * inner;
                                out[i] = (gd[i] - y[i] * dot) / norm;
                            }
                        }
                    }
                    Tensor::new(shape, out).expect("shape")
                });
            }
            Op::ChannelNorm(x) => {
                let vx = self.value(*x);
                let (n, c, h, w) = vx.dims4();
                let inner = h * w;
                let nv = node.value.data();
                self.give(grads, *x, || {
                    let xd = vx.data();
                    let mut out = vec![T::zero(); xd.len()];
                    for s in 0..n {
                        for p in 0..inner {
                            let norm = nv[s * inner + p];
                            if norm == T::zero() {
                                continue;
                            }
                            let k = gd[s * inner + p] / norm;
                            for ch in 0..c {
                                let i = (s * c + ch) * inner + p;
                                out[i] = k * xd[i];
                            }
                        }
                    }
                    Tensor::new(vx.shape(), out).expect("shape")
                });
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                self.give(grads, *x, || {
                    let mut out = vec![T::zero(); n * c * h * w];
                    let w2 = 2 * w;
                    for plane in 0..n * c {
                        let src = &gd[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
                        for y in 0..2 * h {
                            for xo in 0..w2 {
                                dst[(y / 2) * w + xo / 2] += src[y * w2 + xo];
                            }
                        }
                    }
                    Tensor::new(&[n, c, h, w], out).expect("shape")
                });
            }
            Op::ConcatChannels(parts) => {
                let (n, ctot, h, w) = g.dims4();
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    self.give(grads, p, || {
                        let mut out = Vec::with_capacity(n * pc * plane);
                        for s in 0..n {
                            let start = (s * ctot + offset) * plane;
                            out.extend_from_slice(&gd[start..start + pc * plane]);
                        }
                        Tensor::new(&[n, pc, h, w], out).expect("shape")
                    });
                    offset += pc;
                }
            }
            Op::ConcatBatch(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[0];
                    self.give(grads, p, || g.slice_batch(start, len));
                    start += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let vx = self.value(*x);
                if self.nodes[x.0].requires_grad {
                    let per: usize = vx.shape()[1..].iter().product();
                    let mut out = Tensor::zeros(vx.shape());
                    out.data_mut()[start * per..start * per + gd.len()].copy_from_slice(gd);
                    acc(grads, *x, out);
                }
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, din) = (vx.shape()[0], vx.shape()[1]);
                let dout = vw.shape()[0];
                self.give(grads, *x, || {
                    let mut out = vec![T::zero(); n * din];
                    T::gemm(n, dout, din, T::one(), gd, dout as isize, 1, vw.data(), din as isize, 1, T::zero(), &mut out, din as isize, 1);
                    Tensor::new(&[n, din], out).expect("shape")
                });
                self.give(grads, *w, || {
                    let mut out = vec![T::zero(); dout * din];
                    T::gemm(dout, n, din, T::one(), gd, 1, dout as isize, vx.data(), din as isize, 1, T::zero(), &mut out, din as isize, 1);
                    Tensor::new(&[dout, din], out).expect("shape")
                });
                if let Some(b) = b {
                    self.give(grads, *b, || {
                        let mut out = vec![T::zero(); dout];
                        for row in gd.chunks(dout) {
                            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                        }
                        Tensor::new(&[dout], out).expect("shape")
                    });
                }
            }
            Op::MeanSpatial(x) => {
                let vx = self.value(*x);
                let (_, _, h, w) = vx.dims4();
                let count = T::from_usize_lossy(h * w);
                self.give(grads, *x, || {
                    let mut out = Vec::with_capacity(vx.numel());
                    for &gv in gd {
                        out.extend(std::iter::repeat_n(gv / count, h * w));
                    }
                    Tensor::new(vx.shape(), out).expect("shape")
                });
            }
            Op::ScaleChannels { f, s } => {
                let (vf, vs) = (self.value(*f), self.value(*s));
                let (_, _, h, w) = vf.dims4();
                let plane = h * w;
                self.give(grads, *f, || {
                    let mut out = gd.to_vec();
                    for (p, chunk) in out.chunks_mut(plane).enumerate() {
                        let k = vs.data()[p];
                        chunk.iter_mut().for_each(|v| *v *= k);
                    }
                    Tensor::new(vf.shape(), out).expect("shape")
                });
                self.give(grads, *s, || {
                    let out = gd
                        .chunks(plane)
                        .zip(vf.data().chunks(plane))
                        .map(|(gc, fc)| gc.iter().zip(fc).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    Tensor::new(vs.shape(), out).expect("shape")
                });
            }
            Op::Blur { x, kernel } => {
                let (n, c, h, w) = g.dims4();
                self.give(grads, *x, || {
                    let mut tmp = vec![T::zero(); gd.len()];
                    let mut out = vec![T::zero(); gd.len()];
                    for p in 0..n * c {
                        let r = p * h * w..(p + 1) * h * w;
                        blur_cols(&gd[r.clone()], &mut tmp[r.clone()], h, w, kernel, true);
                        blur_rows(&tmp[r.clone()], &mut out[r], h, w, kernel, true);
                    }
                    Tensor::new(shape, out).expect("shape")
                });
            }
            Op::DiffX(x) => {
                let w = shape[3];
                self.give(grads, *x, || {
                    let mut out = vec![T::zero(); gd.len()];
                    for (src, dst) in gd.chunks(w).zip(out.chunks_mut(w)) {
                        for i in 0..w.saturating_sub(1) {
                            dst[i + 1] += src[i];
                            dst[i] -= src[i];
                        }
                    }
                    Tensor::new(shape, out).expect("shape")
                });
            }
            Op::DiffY(x) => {
                let (h, w) = (shape[2], shape[3]);
                self.give(grads, *x, || {
                    let mut out = vec![T::zero(); gd.len()];
                    for (src, dst) in gd.chunks(h * w).zip(out.chunks_mut(h * w)) {
                        for i in 0..(h.saturating_sub(1)) * w {
                            dst[i + w] += src[i];
                            dst[i] -= src[i];
                        }
                    }
                    Tensor::new(shape, out).expect("shape")
                });
            }
            Op::SpatialRows { x, sample } => {
                if self.nodes[x.0].requires_grad {
                    let vx = self.value(*x);
                    let (_, c, h, w) = vx.dims4();
                    let inner = h * w;
                    let mut out = Tensor::zeros(vx.shape());
                    let dst = &mut out.data_mut()[sample * c * inner..(sample + 1) * c * inner];
                    for ch in 0..c {
                        for p in 0..inner {
                            dst[ch * inner + p] = gd[p * c + ch];
                        }
                    }
                    acc(grads, *x, out);
                }
            }
            Op::CodingRate { s, coef, inverse } => {
                // d/dS log det(I + c SᵀS) = 2c · S · (I + c SᵀS)⁻¹
                let vs = self.value(*s);
                let (n, d) = (vs.shape()[0], vs.shape()[1]);
                let k = T::lit(2.0) * *coef * gd[0];
                self.give(grads, *s, || {
                    let mut out = vec![T::zero(); n * d];
                    T::gemm(n, d, d, k, vs.data(), d as isize, 1, inverse, d as isize, 1, T::zero(), &mut out, d as isize, 1);
                    Tensor::new(&[n, d], out).expect("shape")
                });
            }
        }
    }

    fn give(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.nodes[v.0].requires_grad {
            accumulate(grads, v, f());
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let vx = self.value(x);
        let vw = self.value(w);
        let (n, cin, h, wd) = vx.dims4();
        let (cout, _, k, _) = vw.dims4();
        let (_, _, ho, wo) = g.dims4();
        let geo = ConvGeo { cin, h, w: wd, k, stride, pad, ho, wo };
        let kk = cin * k * k;
        let plane = ho * wo;
        let gd = g.data();
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let wv = vw.data();
        let transposed = (need_x && stride == 1 && pad < k && !geo.is_pointwise()).then(|| {
            let tgeo = ConvGeo { cin: cout, h: ho, w: wo, k, stride: 1, pad: k - 1 - pad, ho: h, wo: wd };
            let mut wflip = vec![T::zero(); cin * cout * k * k];
            for co in 0..cout {
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            wflip[((ci * cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] = wv[((co * cin + ci) * k + ky) * k + kx];
                        }
                    }
                }
            }
            (tgeo, wflip)
        });
        let mut gcol = vec![T::zero(); if transposed.is_some() { cout * k * k * h * wd } else { 0 }];
        let mut col = vec![T::zero(); kk * plane];
        let mut dw = if need_w { vec![T::zero(); cout * kk] } else { Vec::new() };
        let mut dx = if need_x { vec![T::zero(); vx.numel()] } else { Vec::new() };
        let sample_len = cin * h * wd;
        for s in 0..n {
            let gs = &gd[s * cout * plane..(s + 1) * cout * plane];
            if need_w {
                let xs = &vx.data()[s * sample_len..(s + 1) * sample_len];
                let src: &[T] = if geo.is_pointwise() {
                    xs
                } else {
                    im2col(xs, &geo, &mut col);
                    &col
                };
                // Contraction over pixels: row-by-row dots beat a strided GEMM here.
                for (co, grow) in gs.chunks_exact(plane).enumerate() {
                    for (r, crow) in src.chunks_exact(plane).enumerate() {
                        dw[co * kk + r] += dot(grow, crow);
                    }
                }
            }
            if need_x {
                let dxs = &mut dx[s * sample_len..(s + 1) * sample_len];
                if geo.is_pointwise() {
                    T::gemm(kk, cout, plane, T::one(), wv, 1, kk as isize, gs, plane as isize, 1, T::zero(), dxs, plane as isize, 1);
                } else if let Some((tgeo, wflip)) = &transposed {
                    // Stride 1: dx is a correlation of g with the flipped kernel.
                    im2col(gs, tgeo, &mut gcol);
                    let kt = cout * k * k;
                    T::gemm(cin, kt, h * wd, T::one(), wflip, kt as isize, 1, &gcol, (h * wd) as isize, 1, T::zero(), dxs, (h * wd) as isize, 1);
                } else {
                    T::gemm(kk, cout, plane, T::one(), wv, 1, kk as isize, gs, plane as isize, 1, T::zero(), &mut col, plane as isize, 1);
                    col2im(&col, &geo, dxs);
                }
            }
        }
        if need_w {
            accumulate(grads, w, Tensor::new(vw.shape(), dw).expect("shape"));
        }
        if need_x {
            accumulate(grads, x, Tensor::new(vx.shape(), dx).expect("shape"));
        }
        if let Some(b) = b {
            self.give(grads, b, || {
                let mut db = vec![T::zero(); cout];
                for (i, chunk) in gd.chunks(plane).enumerate() {
                    db[i % cout] += chunk.iter().copied().sum::<T>();
                }
                Tensor::new(&[cout], db).expect("shape")
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[T],
        rstd: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let vx = self.value(x);
        let gv = self.value(gamma).data();
        let (_, c, h, w) = vx.dims4();
        let cpg = c / groups;
        let plane = h * w;
        let span = cpg * plane;
        let count = T::from_usize_lossy(span);
        let gd = g.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let need_x = self.nodes[x.0].requires_grad;
        let mut dx = if need_x { vec![T::zero(); vx.numel()] } else { Vec::new() };
        for (gi, (xs, gs)) in vx.data().chunks(span).zip(gd.chunks(span)).enumerate() {
            let (mu, rs) = (mean[gi], rstd[gi]);
            let g0 = (gi % groups) * cpg;
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cpg {
                let ch = g0 + ci;
                let mut dgm = T::zero();
                let mut dbt = T::zero();
                for p in 0..plane {
                    let i = ci * plane + p;
                    let xhat = (xs[i] - mu) * rs;
                    dgm += gs[i] * xhat;
                    dbt += gs[i];
                }
                dgamma[ch] += dgm;
                dbeta[ch] += dbt;
                sum_dxhat += dbt * gv[ch];
                sum_dxhat_xhat += dgm * gv[ch];
            }
            if need_x {
                let m1 = sum_dxhat / count;
                let m2 = sum_dxhat_xhat / count;
                let dst = &mut dx[gi * span..(gi + 1) * span];
                for ci in 0..cpg {
                    let gm = gv[g0 + ci];
                    for p in 0..plane {
                        let i = ci * plane + p;
                        let xhat = (xs[i] - mu) * rs;
                        dst[i] = rs * (gs[i] * gm - m1 - xhat * m2);
                    }
                }
            }
        }
        if need_x {
            accumulate(grads, x, Tensor::new(vx.shape(), dx).expect("shape"));
        }
        self.give(grads, gamma, || Tensor::new(&[c], dgamma).expect("shape"));
        self.give(grads, beta, || Tensor::new(&[c], dbeta).expect("shape"));
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            existing.data_mut().iter_mut().zip(t.data()).for_each(|(a, &b)| *a += b);
        }
        slot @ None => *slot = Some(t),
    }
}

fn zip_map<T: Scalar>(shape: &[usize], a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(shape, a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()).expect("shape")
}

fn axis1_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "need at least two axes");
    (shape[0], shape[1], shape[2..].iter().product())
}

struct ConvGeo {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeo {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], geo: &ConvGeo, col: &mut [T]) {
    let ConvGeo { cin, h, w, k, stride, pad, ho, wo } = *geo;
    let plane = ho * wo;
    for c in 0..cin {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kx, pad, stride, w, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize || lo >= hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let ix0 = lo * stride + kx - pad;
                    if stride == 1 {
                        drow[lo..hi].copy_from_slice(&srow[ix0..ix0 + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi].iter_mut().zip(srow[ix0..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside a row of width `w`.
fn valid_range(kx: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(wo);
    // Largest ox with ox·stride + kx − pad ≤ w − 1.
    let hi = if w + pad < kx + 1 { 0 } else { ((w + pad - kx - 1) / stride + 1).min(wo) };
    (lo, hi.max(lo))
}

fn col2im<T: Scalar>(col: &[T], geo: &ConvGeo, dx: &mut [T]) {
    let ConvGeo { cin, h, w, k, stride, pad, ho, wo } = *geo;
    let plane = ho * wo;
    for c in 0..cin {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_range(kx, pad, stride, w, wo);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * stride + kx - pad;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo + lo..oy * wo + hi];
                    if stride == 1 {
                        for (d, &s) in drow[ix0..ix0 + hi - lo].iter_mut().zip(srow) {
                            *d += s;
                        }
                    } else {
                        for (d, &s) in drow[ix0..].iter_mut().step_by(stride).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// 1-D clamped-edge correlation along rows (`transpose` scatters instead).
fn blur_rows<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize, kernel: &[T], transpose: bool) {
    let r = (kernel.len() / 2) as isize;
    dst.iter_mut().for_each(|v| *v = T::zero());
    for y in 0..h {
        let s = &src[y * w..(y + 1) * w];
        let d = &mut dst[y * w..(y + 1) * w];
        for x in 0..w {
            for (t, &kv) in kernel.iter().enumerate() {
                let ix = (x as isize + t as isize - r).clamp(0, w as isize - 1) as usize;
                if transpose {
                    d[ix] += kv * s[x];
                } else {
                    d[x] += kv * s[ix];
                }
            }
        }
    }
}

fn blur_cols<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize, kernel: &[T], transpose: bool) {
    let r = (kernel.len() / 2) as isize;
    dst.iter_mut().for_each(|v| *v = T::zero());
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let iy = (y as isize + t as isize - r).clamp(0, h as isize - 1) as usize;
            let (from, to) = if transpose { (y, iy) } else { (iy, y) };
            for x in 0..w {
                dst[to * w + x] += kv * src[from * w + x];
            }
        }
    }
}

/// Lower Cholesky factor of a symmetric positive-definite `d × d` matrix.
pub(crate) fn cholesky<T: Scalar>(m: &[T], d: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= T::zero() || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Inverse of `L·Lᵀ` from its lower Cholesky factor.
pub(crate) fn cholesky_inverse<T: Scalar>(l: &[T], d: usize) -> Vec<T> {
    // Invert L (lower triangular), then M⁻¹ = L⁻ᵀ·L⁻¹.
    let mut linv = vec![T::zero(); d * d];
    for i in 0..d {
        linv[i * d + i] = T::one() / l[i * d + i];
        for j in 0..i {
            let mut s = T::zero();
            for k in j..i {
                s += l[i * d + k] * linv[k * d + j];
            }
            linv[i * d + j] = -s / l[i * d + i];
        }
    }
    let mut inv = vec![T::zero(); d * d];
    T::gemm(d, d, d, T::one(), &linv, 1, d as isize, &linv, d as isize, 1, T::zero(), &mut inv, d as isize, 1);
    inv
}
