//! Slice-level forward and backward kernels for the heavier operations.
//!
//! All buffers are dense row-major `(batch, channel, height, width)`. Work is
//! split into independent output planes, so results do not depend on the
//! number of worker threads.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    use rayon::prelude::*;
    if chunk == 0 || buf.is_empty() {
        return;
    }
    buf.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if chunk == 0 || buf.is_empty() {
        return;
    }
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Resolved geometry of a grouped 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 4],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [batch, in_c, in_h, in_w] = input;
        if groups == 0 || in_c % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: {in_c} input channels not divisible by groups={groups}"
            )));
        }
        let &[out_c, cin_g, kh, kw] = weight else {
            return Err(Error::dim(
                "conv2d",
                "weight rank",
                format!("expected [Cout, Cin/groups, k, k], got {weight:?}"),
            ));
        };
        if out_c % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: {out_c} output channels not divisible by groups={groups}"
            )));
        }
        if cin_g != in_c / groups {
            return Err(Error::dim(
                "conv2d",
                "channel",
                format!(
                    "weight expects {cin_g} channels per group, input provides {}",
                    in_c / groups
                ),
            ));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", "kernel", format!("non-square kernel {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel size {kh} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        if in_h + 2 * padding < kh {
            return Err(Error::dim(
                "conv2d",
                "height",
                format!("padded height {} smaller than kernel {kh}", in_h + 2 * padding),
            ));
        }
        if in_w + 2 * padding < kh {
            return Err(Error::dim(
                "conv2d",
                "width",
                format!("padded width {} smaller than kernel {kh}", in_w + 2 * padding),
            ));
        }
        Ok(Self {
            batch,
            in_c,
            in_h,
            in_w,
            out_c,
            kernel: kh,
            stride,
            padding,
            groups,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kh) / stride + 1,
        })
    }

    fn cin_per_group(&self) -> usize {
        self.in_c / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.out_c / self.groups
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output indices `lo..hi` whose input coordinate `o*stride + tap - pad`
/// lands inside `0..in_len`.
#[inline]
fn valid_range(tap: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > tap { (pad - tap).div_ceil(stride) } else { 0 };
    if in_len + pad < tap + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - tap) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Accumulates each output plane in f64, so f32 results are rounded once.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let (cin_g, cout_g, k) = (g.cin_per_group(), g.cout_per_group(), g.kernel);
    let mut out = vec![T::zero(); g.batch * g.out_c * plane_out];
    for_each_chunk(&mut out, plane_out, |idx, o| {
        let (b, oc) = (idx / g.out_c, idx % g.out_c);
        let grp = oc / cout_g;
        let mut acc = vec![bias.map_or(0.0, |bias| bias[oc].as_f64()); plane_out];
        for icl in 0..cin_g {
            let ic = grp * cin_g + icl;
            let inp = &input[(b * g.in_c + ic) * plane_in..][..plane_in];
            let wbase = (oc * cin_g + icl) * k * k;
            if g.is_pointwise() {
                let w = weight[wbase].as_f64();
                acc.iter_mut().zip(inp).for_each(|(a, &iv)| *a += w * iv.as_f64());
                continue;
            }
            for ky in 0..k {
                let (ylo, yhi) = valid_range(ky, g.padding, g.stride, g.in_h, g.out_h);
                for kx in 0..k {
                    let w = weight[wbase + ky * k + kx].as_f64();
                    let (xlo, xhi) = valid_range(kx, g.padding, g.stride, g.in_w, g.out_w);
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.padding;
                        let arow = &mut acc[oy * g.out_w..(oy + 1) * g.out_w];
                        let irow = &inp[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let off = xlo + kx - g.padding;
                            arow[xlo..xhi]
                                .iter_mut()
                                .zip(&irow[off..off + (xhi - xlo)])
                                .for_each(|(a, &iv)| *a += w * iv.as_f64());
                        } else {
                            for ox in xlo..xhi {
                                arow[ox] += w * irow[ox * g.stride + kx - g.padding].as_f64();
                            }
                        }
                    }
                }
            }
        }
        o.iter_mut().zip(&acc).for_each(|(ov, &a)| *ov = T::of(a));
    });
    out
}

pub fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let (cin_g, cout_g, k) = (g.cin_per_group(), g.cout_per_group(), g.kernel);
    let mut gin = vec![T::zero(); g.batch * g.in_c * plane_in];
    for_each_chunk(&mut gin, plane_in, |idx, gi| {
        let (b, ic) = (idx / g.in_c, idx % g.in_c);
        let (grp, icl) = (ic / cin_g, ic % cin_g);
        for ocl in 0..cout_g {
            let oc = grp * cout_g + ocl;
            let go = &grad_out[(b * g.out_c + oc) * plane_out..][..plane_out];
            let wbase = (oc * cin_g + icl) * k * k;
            if g.is_pointwise() {
                let w = weight[wbase];
                gi.iter_mut().zip(go).for_each(|(gv, &ov)| *gv = *gv + w * ov);
                continue;
            }
            for ky in 0..k {
                let (ylo, yhi) = valid_range(ky, g.padding, g.stride, g.in_h, g.out_h);
                for kx in 0..k {
                    let w = weight[wbase + ky * k + kx];
                    let (xlo, xhi) = valid_range(kx, g.padding, g.stride, g.in_w, g.out_w);
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.padding;
                        let grow = &mut gi[iy * g.in_w..(iy + 1) * g.in_w];
                        let orow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 {
                            let off = xlo + kx - g.padding;
                            grow[off..off + (xhi - xlo)]
                                .iter_mut()
                                .zip(&orow[xlo..xhi])
                                .for_each(|(gv, &ov)| *gv = *gv + w * ov);
                        } else {
                            for ox in xlo..xhi {
                                let ix = ox * g.stride + kx - g.padding;
                                grow[ix] = grow[ix] + w * orow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn conv2d_backward_weight<T: Scalar>(g: &ConvGeom, input: &[T], grad_out: &[T]) -> Vec<T> {
    let plane_in = g.in_h * g.in_w;
    let plane_out = g.out_h * g.out_w;
    let (cin_g, cout_g, k) = (g.cin_per_group(), g.cout_per_group(), g.kernel);
    let mut gw = vec![T::zero(); g.out_c * cin_g * k * k];
    for_each_chunk(&mut gw, cin_g * k * k, |oc, gwc| {
        let grp = oc / cout_g;
        for icl in 0..cin_g {
            let ic = grp * cin_g + icl;
            for ky in 0..k {
                let (ylo, yhi) = valid_range(ky, g.padding, g.stride, g.in_h, g.out_h);
                for kx in 0..k {
                    let (xlo, xhi) = valid_range(kx, g.padding, g.stride, g.in_w, g.out_w);
                    if xlo == xhi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for b in 0..g.batch {
                        let go = &grad_out[(b * g.out_c + oc) * plane_out..][..plane_out];
                        let inp = &input[(b * g.in_c + ic) * plane_in..][..plane_in];
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ky - g.padding;
                            let orow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                            let irow = &inp[iy * g.in_w..(iy + 1) * g.in_w];
                            if g.stride == 1 {
                                let off = xlo + kx - g.padding;
                                acc = acc
                                    + orow[xlo..xhi]
                                        .iter()
                                        .zip(&irow[off..off + (xhi - xlo)])
                                        .fold(T::zero(), |s, (&a, &b)| s + a * b);
                            } else {
                                for ox in xlo..xhi {
                                    acc = acc + orow[ox] * irow[ox * g.stride + kx - g.padding];
                                }
                            }
                        }
                    }
                    gwc[(icl * k + ky) * k + kx] = acc;
                }
            }
        }
    });
    gw
}

pub fn conv2d_backward_bias<T: Scalar>(g: &ConvGeom, grad_out: &[T]) -> Vec<T> {
    let plane_out = g.out_h * g.out_w;
    let mut gb = vec![T::zero(); g.out_c];
    for b in 0..g.batch {
        for (oc, acc) in gb.iter_mut().enumerate() {
            let go = &grad_out[(b * g.out_c + oc) * plane_out..][..plane_out];
            *acc = *acc + go.iter().copied().sum::<T>();
        }
    }
    gb
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, per output,
/// the flat input index of the first maximal element in scan order.
pub fn maxpool2_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> (Vec<T>, Vec<usize>) {
    let [b, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_i = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[i] > best {
                        best = input[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

/// Per-output-coordinate source taps of an align-corners-false 2x bilinear
/// upsample along one axis: `(low index, high index, low weight, high weight)`.
pub fn bilinear_taps<T: Scalar>(in_len: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * in_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let hi = src - i0 as f64;
            (i0, i1, T::of(1.0 - hi), T::of(hi))
        })
        .collect()
}

pub fn upsample2_forward<T: Scalar>(dims: [usize; 4], input: &[T]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (ys, xs) = (bilinear_taps::<T>(h), bilinear_taps::<T>(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for_each_chunk(&mut out, oh * ow, |plane, o| {
        let inp = &input[plane * h * w..][..h * w];
        for (oy, &(y0, y1, ly0, ly1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx0, lx1)) in xs.iter().enumerate() {
                let top = lx0 * inp[y0 * w + x0] + lx1 * inp[y0 * w + x1];
                let bot = lx0 * inp[y1 * w + x0] + lx1 * inp[y1 * w + x1];
                o[oy * ow + ox] = ly0 * top + ly1 * bot;
            }
        }
    });
    out
}

pub fn upsample2_backward<T: Scalar>(dims: [usize; 4], grad_out: &[T]) -> Vec<T> {
    let [b, c, h, w] = dims;
    let (ys, xs) = (bilinear_taps::<T>(h), bilinear_taps::<T>(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut gin = vec![T::zero(); b * c * h * w];
    for_each_chunk(&mut gin, h * w, |plane, gi| {
        let go = &grad_out[plane * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, ly0, ly1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, lx0, lx1)) in xs.iter().enumerate() {
                let g = go[oy * ow + ox];
                gi[y0 * w + x0] = gi[y0 * w + x0] + ly0 * lx0 * g;
                gi[y0 * w + x1] = gi[y0 * w + x1] + ly0 * lx1 * g;
                gi[y1 * w + x0] = gi[y1 * w + x0] + ly1 * lx0 * g;
                gi[y1 * w + x1] = gi[y1 * w + x1] + ly1 * lx1 * g;
            }
        }
    });
    gin
}

/// Per-channel batch statistics: mean and biased variance over (B, H, W).
pub fn channel_moments<T: Scalar>(dims: [usize; 4], input: &[T]) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            s += input[(bi * c + ch) * plane..][..plane]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
        let m = s / n;
        let mut sq = 0.0;
        for bi in 0..b {
            sq += input[(bi * c + ch) * plane..][..plane]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / n;
    }
    (mean, var)
}

/// Normalizes with the given per-channel mean and variance. Returns
/// `(output, normalized input, inverse std per channel)`.
pub fn batch_norm_apply<T: Scalar>(
    dims: [usize; 4],
    input: &[T],
    mean: &[f64],
    var: &[f64],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = vec![T::zero(); input.len()];
    let mut out = vec![T::zero(); input.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            let m = T::of(mean[ch]);
            for i in off..off + plane {
                let xh = (input[i] - m) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, xhat, inv_std)
}

/// Backward of batch normalization. `batch_stats` selects the training-mode
/// formula, where mean and variance depend on the input.
pub fn batch_norm_backward<T: Scalar>(
    dims: [usize; 4],
    grad_out: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [b, c, h, w] = dims;
    let plane = h * w;
    let n = (b * plane) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); grad_out.len()];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += grad_out[i].as_f64();
                sum_dy_xhat += (grad_out[i] * xhat[i]).as_f64();
            }
        }
        dgamma[ch] = T::of(sum_dy_xhat);
        dbeta[ch] = T::of(sum_dy);
        let scale = gamma[ch] * inv_std[ch];
        let mean_dy = T::of(sum_dy / n);
        let mean_dy_xhat = T::of(sum_dy_xhat / n);
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = if batch_stats {
                    scale * (grad_out[i] - mean_dy - xhat[i] * mean_dy_xhat)
                } else {
                    scale * grad_out[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
