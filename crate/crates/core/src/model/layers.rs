//! Forward and backward kernels for the residual blocks.
//!
//! Activations are stored channel-major (`[c, n, h, w]`), so a convolution is
//! one GEMM over the whole batch and batch-norm statistics run over a
//! contiguous slice per channel.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

pub(crate) const LEAKY_SLOPE: f32 = 0.1;
pub(crate) const BN_EPS: f32 = 1e-5;
pub(crate) const BN_MOMENTUM: f32 = 0.1;

/// Channel-major activation `[c, n, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self { c, n, h, w, data: vec![0.0; c * n * h * w] }
    }

    pub fn same_shape(&self, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self { c: self.c, n: self.n, h: self.h, w: self.w, data }
    }

    /// Elements per channel.
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    /// From `[n, h, w, c]` row-major data.
    pub fn from_nhwc(n: usize, h: usize, w: usize, c: usize, src: &[f32]) -> Self {
        let mut out = Self::zeros(c, n, h, w);
        for b in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let s = ((b * h + y) * w + x) * c;
                    for ch in 0..c {
                        out.data[((ch * n + b) * h + y) * w + x] = src[s + ch];
                    }
                }
            }
        }
        out
    }

    /// To `[n, h, w, c]` row-major data.
    pub fn to_nhwc(&self) -> Vec<f32> {
        let (c, n, h, w) = (self.c, self.n, self.h, self.w);
        let mut out = vec![0.0; self.data.len()];
        for ch in 0..c {
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        out[((b * h + y) * w + x) * c + ch] = self.data[((ch * n + b) * h + y) * w + x];
                    }
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Act) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], beta: f32) {
    let a = if a_t {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let b = if b_t {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let mut c = ArrayViewMut2::from_shape((m, n), c).unwrap();
    general_mat_mul(1.0, &a, &b, beta, &mut c);
}

/// Unfolds 3×3 patches (padding 1) into `[c·9, n·h·w]`.
fn im2col3(x: &Act) -> Vec<f32> {
    let (c, n, h, w) = (x.c, x.n, x.h, x.w);
    let l = n * h * w;
    let mut col = vec![0.0f32; c * 9 * l];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 9) + ky * 3 + kx) * l..][..l];
                for b in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &x.data[((ch * n + b) * h + sy as usize) * w..][..w];
                        let dst = &mut row[(b * h + y) * w..][..w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds `[c·9, n·h·w]` patch gradients back onto the input.
fn col2im3(col: &[f32], c: usize, n: usize, h: usize, w: usize) -> Act {
    let l = n * h * w;
    let mut out = Act::zeros(c, n, h, w);
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ch * 9) + ky * 3 + kx) * l..][..l];
                for b in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut out.data[((ch * n + b) * h + sy as usize) * w..][..w];
                        let src = &row[(b * h + y) * w..][..w];
                        match kx {
                            0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                            1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                            _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution without bias; `kernel` is 1 or 3, stride 1, "same" padding.
/// `weight` is `[c_out, c_in, k, k]`.
pub(crate) fn conv_forward(x: &Act, weight: &[f32], c_out: usize, kernel: usize) -> Act {
    let l = x.plane();
    let k = x.c * kernel * kernel;
    let mut out = Act::zeros(c_out, x.n, x.h, x.w);
    if kernel == 1 {
        gemm(c_out, k, l, weight, false, &x.data, false, &mut out.data, 0.0);
    } else {
        let col = im2col3(x);
        gemm(c_out, k, l, weight, false, &col, false, &mut out.data, 0.0);
    }
    out
}

/// Returns the input gradient and accumulates the weight gradient.
pub(crate) fn conv_backward(x: &Act, weight: &[f32], grad_out: &Act, kernel: usize, grad_weight: &mut [f32]) -> Act {
    let l = x.plane();
    let k = x.c * kernel * kernel;
    let c_out = grad_out.c;
    if kernel == 1 {
        gemm(c_out, l, k, &grad_out.data, false, &x.data, true, grad_weight, 1.0);
        let mut gx = x.same_shape(vec![0.0; x.data.len()]);
        gemm(k, c_out, l, weight, true, &grad_out.data, false, &mut gx.data, 0.0);
        gx
    } else {
        let col = im2col3(x);
        gemm(c_out, l, k, &grad_out.data, false, &col, true, grad_weight, 1.0);
        let mut gcol = vec![0.0f32; k * l];
        gemm(k, c_out, l, weight, true, &grad_out.data, false, &mut gcol, 0.0);
        col2im3(&gcol, x.c, x.n, x.h, x.w)
    }
}

pub(crate) struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Training-mode batch norm; updates the running statistics in place.
pub(crate) fn bn_forward_train(
    x: &Act,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
) -> (Act, BnCache) {
    let m = x.plane();
    let mut out = vec![0.0f32; x.data.len()];
    let mut xhat = vec![0.0f32; x.data.len()];
    let mut inv_std = vec![0.0f32; x.c];
    for ch in 0..x.c {
        let src = &x.data[ch * m..][..m];
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
        let istd = 1.0 / (var + BN_EPS as f64).sqrt();
        inv_std[ch] = istd as f32;
        let (g, bta) = (gamma[ch], beta[ch]);
        let xh = &mut xhat[ch * m..][..m];
        let dst = &mut out[ch * m..][..m];
        for i in 0..m {
            xh[i] = ((src[i] as f64 - mean) * istd) as f32;
            dst[i] = g * xh[i] + bta;
        }
        let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
        running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * mean as f32;
        running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * unbiased as f32;
    }
    (x.same_shape(out), BnCache { xhat, inv_std })
}

pub(crate) fn bn_forward_eval(x: &Act, gamma: &[f32], beta: &[f32], running_mean: &[f32], running_var: &[f32]) -> Act {
    let m = x.plane();
    let mut out = vec![0.0f32; x.data.len()];
    for ch in 0..x.c {
        let scale = gamma[ch] / (running_var[ch] + BN_EPS).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        out[ch * m..][..m]
            .iter_mut()
            .zip(&x.data[ch * m..][..m])
            .for_each(|(o, &v)| *o = v * scale + shift);
    }
    x.same_shape(out)
}

pub(crate) fn bn_backward(
    grad_out: &Act,
    cache: &BnCache,
    gamma: &[f32],
    grad_gamma: &mut [f32],
    grad_beta: &mut [f32],
) -> Act {
    let m = grad_out.plane();
    let mut gx = vec![0.0f32; grad_out.data.len()];
    for ch in 0..grad_out.c {
        let g = &grad_out.data[ch * m..][..m];
        let xh = &cache.xhat[ch * m..][..m];
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for i in 0..m {
            sum_g += g[i] as f64;
            sum_gx += (g[i] * xh[i]) as f64;
        }
        grad_gamma[ch] += sum_gx as f32;
        grad_beta[ch] += sum_g as f32;
        let k = (gamma[ch] * cache.inv_std[ch]) as f64 / m as f64;
        let dst = &mut gx[ch * m..][..m];
        for i in 0..m {
            dst[i] = (k * (m as f64 * g[i] as f64 - sum_g - xh[i] as f64 * sum_gx)) as f32;
        }
    }
    grad_out.same_shape(gx)
}

pub(crate) fn leaky_relu(x: &mut Act) {
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE
        }
    });
}

/// Backward through a leaky ReLU given its output (the sign is preserved).
pub(crate) fn leaky_relu_backward(grad: &mut Act, output: &Act) {
    grad.data.iter_mut().zip(&output.data).for_each(|(g, &o)| {
        if o <= 0.0 {
            *g *= LEAKY_SLOPE
        }
    });
}

/// 2×2 max pooling with stride 2 (odd edges dropped). Returns the argmax
/// offsets within each window.
pub(crate) fn maxpool_forward(x: &Act) -> (Act, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u8; out.data.len()];
    for plane in 0..x.c * x.n {
        let src = &x.data[plane * x.h * x.w..][..x.h * x.w];
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_k = 0u8;
                for k in 0..4u8 {
                    let v = src[(2 * y + (k as usize >> 1)) * x.w + 2 * xx + (k as usize & 1)];
                    if v > best {
                        best = v;
                        best_k = k;
                    }
                }
                let o = (plane * oh + y) * ow + xx;
                out.data[o] = best;
                arg[o] = best_k;
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward(grad_out: &Act, arg: &[u8], in_h: usize, in_w: usize) -> Act {
    let (oh, ow) = (grad_out.h, grad_out.w);
    let mut gx = Act::zeros(grad_out.c, grad_out.n, in_h, in_w);
    for plane in 0..grad_out.c * grad_out.n {
        for y in 0..oh {
            for x in 0..ow {
                let o = (plane * oh + y) * ow + x;
                let k = arg[o] as usize;
                gx.data[plane * in_h * in_w + (2 * y + (k >> 1)) * in_w + 2 * x + (k & 1)] += grad_out.data[o];
            }
        }
    }
    gx
}

/// DropBlock mask (already rescaled) for one activation, or `None` when the
/// sampled mask keeps everything.
pub(crate) fn dropblock_mask(x: &Act, drop_rate: f32, block_size: usize, rng: &mut impl Rng) -> Option<Vec<f32>> {
    let bs = block_size.min(x.h).min(x.w).max(1);
    if drop_rate <= 0.0 {
        return None;
    }
    let valid_h = x.h - bs + 1;
    let valid_w = x.w - bs + 1;
    let gamma = (drop_rate / (bs * bs) as f32) * (x.h * x.w) as f32 / (valid_h * valid_w) as f32;
    let gamma = gamma.min(1.0) as f64;
    let mut mask = vec![1.0f32; x.data.len()];
    for plane in 0..x.c * x.n {
        let m = &mut mask[plane * x.h * x.w..][..x.h * x.w];
        for cy in 0..valid_h {
            for cx in 0..valid_w {
                if rng.random_bool(gamma) {
                    for y in cy..cy + bs {
                        m[y * x.w + cx..y * x.w + cx + bs].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
    }
    let kept = mask.iter().filter(|&&v| v > 0.0).count();
    if kept == mask.len() {
        return None;
    }
    let scale = mask.len() as f32 / kept.max(1) as f32;
    mask.iter_mut().for_each(|v| *v *= scale);
    Some(mask)
}
