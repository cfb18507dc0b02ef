//! Reference implementations used as test oracles.
//!
//! Everything here is written as the most literal loop nest over `f64`
//! buffers, shares no code with `nowcast-core`, and is only ever pulled in as
//! a dev-dependency.

/// Deterministic value stream (splitmix64) for seeding test inputs.
pub struct Seeded(u64);

impl Seeded {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + (hi - lo) * u
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    input: &[f64],
    [b, cin, h, w]: [usize; 4],
    weight: &[f64],
    cout: usize,
    k: usize,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> (Vec<f64>, [usize; 4]) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let cin_g = cin / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for oc in 0..cout {
            let g = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for icl in 0..cin_g {
                        let ic = g * cin_g + icl;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = input[((n * cin + ic) * h + iy as usize) * w + ix as usize];
                                let wv = weight[((oc * cin_g + icl) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((n * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (out, [b, cout, oh, ow])
}

pub fn maxpool2(input: &[f64], [b, c, h, w]: [usize; 4]) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            for oy in 0..h / 2 {
                for ox in 0..w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(input[((n * c + ch) * h + 2 * oy + dy) * w + 2 * ox + dx]);
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

/// Half-pixel (align-corners false) bilinear 2x upsampling, evaluated per
/// output pixel straight from the interpolation formula.
pub fn upsample_bilinear2(input: &[f64], [b, c, h, w]: [usize; 4]) -> Vec<f64> {
    let src = |o: usize, n: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * (n as f64 / (2 * n) as f64) - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = if i0 < n - 1 { i0 + 1 } else { i0 };
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            let at = |y: usize, x: usize| input[((n * c + ch) * h + y) * w + x];
            for oy in 0..2 * h {
                let (y0, y1, fy) = src(oy, h);
                for ox in 0..2 * w {
                    let (x0, x1, fx) = src(ox, w);
                    let v = (1.0 - fy) * (1.0 - fx) * at(y0, x0)
                        + (1.0 - fy) * fx * at(y0, x1)
                        + fy * (1.0 - fx) * at(y1, x0)
                        + fy * fx * at(y1, x1);
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Training-mode batch normalization from explicit statistics.
pub fn batch_norm_train(
    input: &[f64],
    [b, c, h, w]: [usize; 4],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for ch in 0..c {
        let mut vals = Vec::new();
        for n in 0..b {
            for p in 0..h * w {
                vals.push(input[(n * c + ch) * h * w + p]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        for n in 0..b {
            for p in 0..h * w {
                let i = (n * c + ch) * h * w + p;
                out[i] = gamma[ch] * (input[i] - mean) / (var + eps).sqrt() + beta[ch];
            }
        }
    }
    out
}

pub fn reduce_spatial(input: &[f64], [b, c, h, w]: [usize; 4], max: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..b {
        for ch in 0..c {
            let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
            for y in 0..h {
                for x in 0..w {
                    let v = input[((n * c + ch) * h + y) * w + x];
                    acc = if max { acc.max(v) } else { acc + v };
                }
            }
            out.push(if max { acc } else { acc / (h * w) as f64 });
        }
    }
    out
}

pub fn reduce_channel(input: &[f64], [b, c, h, w]: [usize; 4], max: bool) -> Vec<f64> {
    let mut out = Vec::new();
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut acc = if max { f64::NEG_INFINITY } else { 0.0 };
                for ch in 0..c {
                    let v = input[((n * c + ch) * h + y) * w + x];
                    acc = if max { acc.max(v) } else { acc + v };
                }
                out.push(if max { acc } else { acc / c as f64 });
            }
        }
    }
    out
}

/// `out[b][m] = sum_n x[b][n] * w[m][n]` (+ bias).
pub fn linear(x: &[f64], b: usize, n: usize, w: &[f64], m: usize, bias: Option<&[f64]>) -> Vec<f64> {
    let mut out = vec![0.0; b * m];
    for i in 0..b {
        for j in 0..m {
            let mut acc = bias.map_or(0.0, |bs| bs[j]);
            for k in 0..n {
                acc += x[i * n + k] * w[j * n + k];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error, with magnitudes below `floor` treated
/// as `floor` so that near-zero gradients are compared absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Architecture knobs for [`param_count`].
#[derive(Clone, Copy, Debug)]
pub struct UnetShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base: usize,
    pub depth: usize,
    pub separable: bool,
    pub attention: bool,
    pub reduction: usize,
    pub spatial_kernel: usize,
    pub multiplier: usize,
}

/// Closed-form trainable parameter count of the bilinear U-Net family,
/// summed layer by layer.
///
/// - 3x3 regular conv (bias-free): `cin * cout * 9`
/// - separable conv: depthwise `cin * m * 9` + pointwise `cin * m * cout`
/// - batch norm: `2 * c`
/// - attention on width `c`: two biased linears `c -> c/r -> c` plus a
///   biased `2 -> 1` spatial conv of size `k*k`
/// - output head: biased 1x1 conv
pub fn param_count(s: UnetShape) -> usize {
    let conv = |cin: usize, cout: usize| {
        if s.separable {
            cin * s.multiplier * 9 + cin * s.multiplier * cout
        } else {
            cin * cout * 9
        }
    };
    let double = |cin: usize, mid: usize, cout: usize| conv(cin, mid) + 2 * mid + conv(mid, cout) + 2 * cout;
    let attention = |c: usize| {
        let hid = c / s.reduction;
        (c * hid + hid) + (hid * c + c) + (2 * s.spatial_kernel * s.spatial_kernel + 1)
    };
    let mut widths: Vec<usize> = (0..s.depth).map(|i| s.base << i).collect();
    *widths.last_mut().unwrap() /= 2;

    let mut total = double(s.in_channels, widths[0], widths[0]);
    for i in 1..s.depth {
        total += double(widths[i - 1], widths[i], widths[i]);
    }
    if s.attention {
        total += widths.iter().map(|&c| attention(c)).sum::<usize>();
    }
    for i in (0..s.depth - 1).rev() {
        let out = if i == 0 { widths[0] } else { widths[i - 1] };
        total += double(2 * widths[i], widths[i], out);
    }
    total + widths[0] * s.out_channels + s.out_channels
}
