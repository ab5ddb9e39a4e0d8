//! Forward and backward kernels on raw tensors.
//!
//! Every differentiable operation used by the segmentation networks has a
//! forward function here and, where it has inputs to differentiate, a matching
//! backward function taking the upstream gradient. The [`Tape`](super::Tape)
//! records calls to these; inference calls them directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, MatRef, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding of `k / 2` on every side.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new<T: Real>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        padding: Padding,
        stride: usize,
    ) -> Result<Self> {
        let (n, c, h, w) = input.nchw()?;
        let (f, wc, kh, kw) = weight.nchw()?;
        if wc != c {
            return Err(Error::shape("conv2d", input.shape(), weight.shape()));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be square with odd extent, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let k = kh;
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::shape("conv2d", input.shape(), weight.shape()));
                }
                0
            }
        };
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            k,
            pad,
            stride,
            ho,
            wo,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// A 1x1 stride-1 unpadded convolution reads its input directly as the
    /// column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (k, pad, s) = (g.k, g.pad as isize, g.stride);
    let npix = g.out_pixels();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (k, pad, s) = (g.k, g.pad as isize, g.stride);
    let npix = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - pad;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation of `input [N,C,H,W]` with `weight [F,C,k,k]`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, padding, stride)?;
    if let Some(b) = bias {
        if b.numel() != g.f {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.f]));
        }
    }
    let npix = g.out_pixels();
    let kk = g.patch_len();
    let in_stride = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.f * npix];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kk * npix]
    };
    let wmat = MatRef::new(weight.data(), g.f, kk);
    for n in 0..g.n {
        let img = &input.data()[n * in_stride..(n + 1) * in_stride];
        let dst = &mut out[n * g.f * npix..(n + 1) * g.f * npix];
        if let Some(b) = bias {
            for (f, row) in dst.chunks_exact_mut(npix).enumerate() {
                row.fill(b.data()[f]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            gemm(wmat, MatRef::new(img, kk, npix), beta, dst);
        } else {
            im2col(&g, img, &mut cols);
            gemm(wmat, MatRef::new(&cols, kk, npix), beta, dst);
        }
    }
    Ok(Tensor::from_parts(vec![g.n, g.f, g.ho, g.wo], out))
}

/// Gradients of [`conv2d`]; each output is computed only when requested.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    padding: Padding,
    stride: usize,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, padding, stride)?;
    let npix = g.out_pixels();
    let kk = g.patch_len();
    let in_stride = g.c * g.h * g.w;
    if grad_out.len() != g.n * g.f * npix {
        return Err(Error::shape(
            "conv2d backward",
            &[grad_out.len()],
            &[g.n * g.f * npix],
        ));
    }
    let mut dx = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = want_weight.then(|| vec![T::zero(); weight.numel()]);
    let mut db = want_bias.then(|| vec![T::zero(); g.f]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * npix }];
    let mut dcols = vec![T::zero(); if want_input { kk * npix } else { 0 }];
    let wmat = MatRef::new(weight.data(), g.f, kk);

    for n in 0..g.n {
        let gout = &grad_out[n * g.f * npix..(n + 1) * g.f * npix];
        let gmat = MatRef::new(gout, g.f, npix);
        let img = &input.data()[n * in_stride..(n + 1) * in_stride];
        if let Some(db) = db.as_mut() {
            for (f, row) in gout.chunks_exact(npix).enumerate() {
                db[f] = row.iter().fold(db[f], |a, &v| a + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let colmat = if g.is_pointwise() {
                MatRef::new(img, kk, npix)
            } else {
                im2col(&g, img, &mut cols);
                MatRef::new(&cols[..], kk, npix)
            };
            gemm(gmat, colmat.t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * in_stride..(n + 1) * in_stride];
            if g.is_pointwise() {
                gemm(wmat.t(), gmat, T::zero(), dst);
            } else {
                gemm(wmat.t(), gmat, T::zero(), &mut dcols);
                col2im(&g, &dcols, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        weight: dw.map(|d| Tensor::from_parts(weight.shape().to_vec(), d)),
        bias: db.map(|d| Tensor::from_parts(vec![g.f], d)),
    })
}

/// 2x2 max pooling with stride 2. Also returns, for every output cell, the
/// flat input index it was taken from (first row-major maximum on ties).
pub fn max_pool2x2<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "max pooling needs even extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    let x = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), arg))
}

pub fn max_pool2x2_backward<T: Real>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] = dx[i] + g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for (plane, src) in input.data().chunks_exact(h * w).enumerate() {
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let top = 2 * y * wo;
            for (x, &v) in row.iter().enumerate() {
                dst[top + 2 * x] = v;
                dst[top + 2 * x + 1] = v;
            }
            dst.copy_within(top..top + wo, top + wo);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub fn upsample2x_backward<T: Real>(input_shape: &[usize], grad_out: &[T]) -> Vec<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let wo = 2 * w;
    let planes: usize = input_shape[0] * input_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        let g = &grad_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let d = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let t = 2 * y * wo + 2 * x;
                d[y * w + x] = g[t] + g[t + 1] + g[t + wo] + g[t + wo + 1];
            }
        }
    }
    dx
}

/// Concatenation along the channel axis of rank-4 tensors.
pub fn concat_channels<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (n, _, h, w) = first.nchw()?;
    let mut channels = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.nchw()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape("concat", first.shape(), t.shape()));
        }
        channels += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * channels * plane);
    for b in 0..n {
        for t in inputs {
            let per = t.shape()[1] * plane;
            out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
        }
    }
    Ok(Tensor::from_parts(vec![n, channels, h, w], out))
}

/// Channels `[start, start + len)` of a rank-4 tensor.
pub fn slice_channels<T: Real>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.nchw()?;
    if len == 0 || start + len > c {
        return Err(Error::InvalidArgument(format!(
            "channel slice {start}..{} out of range for {c} channels",
            start + len
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * len * plane);
    for b in 0..n {
        let base = (b * c + start) * plane;
        out.extend_from_slice(&input.data()[base..base + len * plane]);
    }
    Ok(Tensor::from_parts(vec![n, len, h, w], out))
}

/// Adds `grad` for a channel slice back into a gradient buffer shaped like
/// the sliced input.
pub(crate) fn slice_channels_backward<T: Real>(
    input_shape: &[usize],
    start: usize,
    grad: &[T],
    dst: &mut [T],
) {
    let (n, c, plane) = (input_shape[0], input_shape[1], input_shape[2] * input_shape[3]);
    let len = grad.len() / (n * plane);
    for b in 0..n {
        let base = (b * c + start) * plane;
        let src = &grad[b * len * plane..(b + 1) * len * plane];
        for (d, &g) in dst[base..base + len * plane].iter_mut().zip(src) {
            *d = *d + g;
        }
    }
}

pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub fn leaky_relu_backward<T: Real>(input: &[T], slope: T, grad_out: &[T]) -> Vec<T> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x >= T::zero() { g } else { slope * g })
        .collect()
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| {
        // Branch on sign so exp never overflows.
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

pub fn sigmoid_backward<T: Real>(output: &[T], grad_out: &[T]) -> Vec<T> {
    output
        .iter()
        .zip(grad_out)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect()
}

/// Inverted-dropout multiplier for `len` elements: 0 with probability
/// `rate`, otherwise `1 / (1 - rate)`. A pure function of `seed`.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, seed: u64) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    if rate == 0.0 {
        return Ok(vec![T::one(); len]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect())
}

/// Saved state of a batch-normalisation forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<f64>,
    /// Unbiased variance, for running statistics.
    pub batch_var: Vec<f64>,
}

fn check_affine<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = input.nchw()?;
    if gamma.numel() != c {
        return Err(Error::shape("batch_norm gamma", gamma.shape(), &[c]));
    }
    if beta.numel() != c {
        return Err(Error::shape("batch_norm beta", beta.shape(), &[c]));
    }
    Ok((n, c, h * w))
}

/// Per-channel standardisation over `(N, H, W)` followed by `gamma * x + beta`.
pub fn batch_norm_train<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, plane) = check_affine(input, gamma, beta)?;
    let m = (n * plane) as f64;
    let x = input.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            mean[ch] += x[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            var[ch] += x[base..base + plane]
                .iter()
                .map(|v| (v.as_f64() - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
    let unbiased: Vec<f64> = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
    let inv_std: Vec<T> = biased.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
    let mut normalized = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let mu = T::from_f64(mean[ch]);
            let (g, be, is) = (gamma.data()[ch], beta.data()[ch], inv_std[ch]);
            for i in base..base + plane {
                let xh = (x[i] - mu) * is;
                normalized[i] = xh;
                out[i] = g * xh + be;
            }
        }
    }
    Ok((
        Tensor::from_parts(input.shape().to_vec(), out),
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: unbiased,
        },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_train_backward<T: Real>(
    shape: &[usize],
    gamma: &[T],
    cache: &BatchNormCache<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = (n * plane) as f64;
    let xh = &cache.normalized;
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for i in base..base + plane {
                let g = grad_out[i].as_f64();
                sum_g[ch] += g;
                sum_gx[ch] += g * xh[i].as_f64();
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            let scale = gamma[ch].as_f64() * cache.inv_std[ch].as_f64() / m;
            let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
            for i in base..base + plane {
                let v = m * grad_out[i].as_f64() - sg - xh[i].as_f64() * sgx;
                dx[i] = T::from_f64(scale * v);
            }
        }
    }
    let dgamma = sum_gx.iter().map(|&v| T::from_f64(v)).collect();
    let dbeta = sum_g.iter().map(|&v| T::from_f64(v)).collect();
    (dx, dgamma, dbeta)
}

/// Normalisation with fixed (running) statistics.
pub fn batch_norm_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (n, c, plane) = check_affine(input, gamma, beta)?;
    if running_mean.numel() != c || running_var.numel() != c {
        return Err(Error::shape("batch_norm running stats", running_mean.shape(), &[c]));
    }
    let (scale, shift) = eval_affine(gamma, beta, running_mean, running_var, eps);
    let mut out = input.data().to_vec();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * plane;
            for v in &mut out[base..base + plane] {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// Per-channel `(scale, shift)` of eval-mode normalisation.
pub(crate) fn eval_affine<T: Real>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let c = gamma.numel();
    let mut scale = Vec::with_capacity(c);
    let mut shift = Vec::with_capacity(c);
    for ch in 0..c {
        let is = 1.0 / (running_var.data()[ch].as_f64() + eps).sqrt();
        let s = gamma.data()[ch].as_f64() * is;
        scale.push(T::from_f64(s));
        shift.push(T::from_f64(beta.data()[ch].as_f64() - running_mean.data()[ch].as_f64() * s));
    }
    (scale, shift)
}
