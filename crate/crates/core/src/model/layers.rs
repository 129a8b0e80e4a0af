//! Layer primitives with explicit forward and backward passes.
//!
//! All kernels are plain loops over row-major C×H×W tensors with fixed
//! iteration order, so results are reproducible run to run.

use crate::tensor::Tensor;

/// 3×3 convolution with padding 1. `weight` is co×ci×3×3, `bias` is co.
pub fn conv3x3_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = input.chw().expect("conv input must be C×H×W");
    let co = weight.shape()[0];
    debug_assert_eq!(weight.shape(), &[co, ci, 3, 3]);
    let mut out = Tensor::zeros(&[co, h, w]);
    let plane = h * w;
    let src = input.data();
    let wd = weight.data();
    let dst = out.data_mut();
    for oc in 0..co {
        let b = bias.data()[oc];
        dst[oc * plane..(oc + 1) * plane].fill(b);
    }
    for oc in 0..co {
        for ic in 0..ci {
            let in_plane = &src[ic * plane..(ic + 1) * plane];
            let wbase = (oc * ci + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = row_range(h, dy);
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (x0, x1) = row_range(w, dx);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let wv = wd[wbase + ky * 3 + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut dst[oc * plane + y * w + x0..oc * plane + y * w + x1];
                        let irow = &in_plane[iy * w + (x0 as isize + dx) as usize..];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3_forward`]: returns (d_input, d_weight, d_bias).
pub fn conv3x3_backward(input: &Tensor, weight: &Tensor, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, h, w) = input.chw().expect("conv input must be C×H×W");
    let co = weight.shape()[0];
    let plane = h * w;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[co]);
    let src = input.data();
    let wd = weight.data();
    let gd = d_out.data();

    for oc in 0..co {
        let gplane = &gd[oc * plane..(oc + 1) * plane];
        d_bias.data_mut()[oc] = gplane.iter().sum();
    }
    for oc in 0..co {
        let gplane = &gd[oc * plane..(oc + 1) * plane];
        for ic in 0..ci {
            let in_plane = &src[ic * plane..(ic + 1) * plane];
            let wbase = (oc * ci + ic) * 9;
            for ky in 0..3usize {
                let dy = ky as isize - 1;
                let (y0, y1) = row_range(h, dy);
                for kx in 0..3usize {
                    let dx = kx as isize - 1;
                    let (x0, x1) = row_range(w, dx);
                    if y0 >= y1 || x0 >= x1 {
                        continue;
                    }
                    let wv = wd[wbase + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let ix = (x0 as isize + dx) as usize;
                        let grow = &gplane[y * w + x0..y * w + x1];
                        let irow = &in_plane[iy * w + ix..iy * w + ix + (x1 - x0)];
                        let drow =
                            &mut d_input.data_mut()[ic * plane + iy * w + ix..ic * plane + iy * w + ix + (x1 - x0)];
                        let mut dot = 0.0;
                        for ((g, i), d) in grow.iter().zip(irow).zip(drow) {
                            dot += g * i;
                            *d += wv * g;
                        }
                        acc += dot;
                    }
                    d_weight.data_mut()[wbase + ky * 3 + kx] = acc;
                }
            }
        }
    }
    (d_input, d_weight, d_bias)
}

fn row_range(extent: usize, shift: isize) -> (usize, usize) {
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift > 0 { extent - shift as usize } else { extent };
    (lo, hi)
}

/// 1×1 convolution (per-pixel linear projection).
pub fn conv1x1_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = input.chw().expect("conv input must be C×H×W");
    let co = weight.shape()[0];
    let plane = h * w;
    let mut out = Tensor::zeros(&[co, h, w]);
    let src = input.data();
    let wd = weight.data();
    let dst = out.data_mut();
    for oc in 0..co {
        let orow = &mut dst[oc * plane..(oc + 1) * plane];
        orow.fill(bias.data()[oc]);
        for ic in 0..ci {
            let wv = wd[oc * ci + ic];
            for (o, i) in orow.iter_mut().zip(&src[ic * plane..(ic + 1) * plane]) {
                *o += wv * i;
            }
        }
    }
    out
}

pub fn conv1x1_backward(input: &Tensor, weight: &Tensor, d_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (ci, h, w) = input.chw().expect("conv input must be C×H×W");
    let co = weight.shape()[0];
    let plane = h * w;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[co]);
    let src = input.data();
    let wd = weight.data();
    let gd = d_out.data();
    for oc in 0..co {
        let gplane = &gd[oc * plane..(oc + 1) * plane];
        d_bias.data_mut()[oc] = gplane.iter().sum();
        for ic in 0..ci {
            let wv = wd[oc * ci + ic];
            let iplane = &src[ic * plane..(ic + 1) * plane];
            let dplane = &mut d_input.data_mut()[ic * plane..(ic + 1) * plane];
            let mut dot = 0.0;
            for ((g, i), d) in gplane.iter().zip(iplane).zip(dplane) {
                dot += g * i;
                *d += wv * g;
            }
            d_weight.data_mut()[oc * ci + ic] = dot;
        }
    }
    (d_input, d_weight, d_bias)
}

pub const NORM_EPS: f64 = 1e-5;

pub struct NormCache {
    /// Normalized activations (x - mean) * inv_std, per channel.
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-channel instance normalization with affine parameters. Statistics are
/// computed per image, never across a batch.
pub fn instance_norm_forward(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, NormCache) {
    let (c, h, w) = input.chw().expect("norm input must be C×H×W");
    let plane = h * w;
    let n = plane as f64;
    let mut out = Tensor::zeros(input.shape());
    let mut xhat = Tensor::zeros(input.shape());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let x = input.channel(ch);
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        inv_std.push(inv);
        let g = gamma.data()[ch];
        let b = beta.data()[ch];
        let xh = xhat.channel_mut(ch);
        for (i, &v) in x.iter().enumerate() {
            xh[i] = (v - mean) * inv;
        }
        let o = out.channel_mut(ch);
        for (i, &v) in xhat.channel(ch).iter().enumerate() {
            o[i] = g * v + b;
        }
    }
    (out, NormCache { xhat, inv_std })
}

/// Backward of instance norm: returns (d_input, d_gamma, d_beta).
pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &Tensor,
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (c, h, w) = d_out.chw().expect("norm grad must be C×H×W");
    let plane = h * w;
    let n = plane as f64;
    let mut d_input = Tensor::zeros(d_out.shape());
    let mut d_gamma = Tensor::zeros(&[c]);
    let mut d_beta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let xh = cache.xhat.channel(ch);
        let dy = d_out.channel(ch);
        let g = gamma.data()[ch];
        let inv = cache.inv_std[ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for i in 0..plane {
            sum_dy += dy[i];
            sum_dy_xh += dy[i] * xh[i];
        }
        d_beta.data_mut()[ch] = sum_dy;
        d_gamma.data_mut()[ch] = sum_dy_xh;
        let mean_dy = sum_dy / n;
        let mean_dy_xh = sum_dy_xh / n;
        let dx = d_input.channel_mut(ch);
        for i in 0..plane {
            dx[i] = g * inv * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
        }
    }
    (d_input, d_gamma, d_beta)
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Gates the upstream gradient on the pre-activation sign.
pub fn relu_backward(pre_activation: &Tensor, d_out: &Tensor) -> Tensor {
    let mut d = d_out.clone();
    for (g, &x) in d.data_mut().iter_mut().zip(pre_activation.data()) {
        if x <= 0.0 {
            *g = 0.0;
        }
    }
    d
}

/// 2×2 max pool with stride 2. Returns the pooled tensor and the flat source
/// index of each maximum (first maximum in row-major order wins ties).
pub fn maxpool2_forward(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = input.chw().expect("pool input must be C×H×W");
    let (nh, nw) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, nh, nw]);
    let mut argmax = vec![0u32; c * nh * nw];
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..nh {
            for x in 0..nw {
                let mut best_idx = base + (2 * y) * w + 2 * x;
                let mut best = src[best_idx];
                for (oy, ox) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + oy) * w + 2 * x + ox;
                    if src[idx] > best {
                        best = src[idx];
                        best_idx = idx;
                    }
                }
                let oi = ch * nh * nw + y * nw + x;
                dst[oi] = best;
                argmax[oi] = best_idx as u32;
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward(d_out: &Tensor, argmax: &[u32], input_shape: &[usize]) -> Tensor {
    let mut d_input = Tensor::zeros(input_shape);
    let d = d_input.data_mut();
    for (g, &idx) in d_out.data().iter().zip(argmax) {
        d[idx as usize] += g;
    }
    d_input
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2_forward(input: &Tensor) -> Tensor {
    let (c, h, w) = input.chw().expect("upsample input must be C×H×W");
    let (nh, nw) = (h * 2, w * 2);
    let mut out = Tensor::zeros(&[c, nh, nw]);
    let src = input.data();
    let dst = out.data_mut();
    for ch in 0..c {
        for y in 0..nh {
            let srow = &src[ch * h * w + (y / 2) * w..];
            let drow = &mut dst[ch * nh * nw + y * nw..ch * nh * nw + (y + 1) * nw];
            for (x, d) in drow.iter_mut().enumerate() {
                *d = srow[x / 2];
            }
        }
    }
    out
}

/// Each source pixel receives the sum of its four upsampled children.
pub fn upsample2_backward(d_out: &Tensor) -> Tensor {
    let (c, nh, nw) = d_out.chw().expect("upsample grad must be C×H×W");
    let (h, w) = (nh / 2, nw / 2);
    let mut d_input = Tensor::zeros(&[c, h, w]);
    let g = d_out.data();
    let d = d_input.data_mut();
    for ch in 0..c {
        for y in 0..nh {
            for x in 0..nw {
                d[ch * h * w + (y / 2) * w + x / 2] += g[ch * nh * nw + y * nw + x];
            }
        }
    }
    d_input
}

/// Stacks `a`'s channels before `b`'s.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, h, w) = a.chw().expect("concat input must be C×H×W");
    let (cb, hb, wb) = b.chw().expect("concat input must be C×H×W");
    debug_assert_eq!((h, w), (hb, wb));
    let mut out = Tensor::zeros(&[ca + cb, h, w]);
    out.data_mut()[..ca * h * w].copy_from_slice(a.data());
    out.data_mut()[ca * h * w..].copy_from_slice(b.data());
    out
}

pub fn split_channels(d_out: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (c, h, w) = d_out.chw().expect("split input must be C×H×W");
    let plane = h * w;
    let a = Tensor::from_vec(&[ca, h, w], d_out.data()[..ca * plane].to_vec()).unwrap();
    let b = Tensor::from_vec(&[c - ca, h, w], d_out.data()[ca * plane..].to_vec()).unwrap();
    (a, b)
}
