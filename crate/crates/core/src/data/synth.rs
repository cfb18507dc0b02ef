use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FrameDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the synthetic blob world.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub blobs: usize,
    /// Per-axis blob speed is drawn from `[-v, v]` pixels per frame.
    pub velocity_range: f64,
    /// Intensity above which a pixel counts as "raining".
    pub threshold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            frames: 400,
            height: 32,
            width: 32,
            blobs: 3,
            velocity_range: 1.0,
            threshold: 0.4,
        }
    }
}

struct Blob {
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    sigma: f64,
    amplitude: f64,
}

/// Signed shortest offset from `a` to `b` on a ring of length `n`.
fn wrap(d: f64, n: f64) -> f64 {
    d - n * (d / n).round()
}

pub const SYNTH_CHANNELS: [&str; 7] = ["intensity", "rainfall", "smooth", "mask", "row", "column", "elevation"];

/// Gaussian blobs advecting with constant velocities on a torus.
///
/// Dynamic channels: intensity `I`; rainfall `max(I - threshold, 0)`; the
/// smooth transform `1 - exp(-I)`; mask `I > threshold`. Static channels:
/// normalized row index, normalized column index and a smooth seeded
/// elevation field.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<FrameDataset> {
    let (h, w) = (cfg.height, cfg.width);
    if h < 16 || w < 16 {
        return Err(Error::Config(format!("synthetic frames must be at least 16x16, got {h}x{w}")));
    }
    if !(cfg.velocity_range >= 0.0) || !cfg.velocity_range.is_finite() {
        return Err(Error::Config("velocity_range must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (hf, wf) = (h as f64, w as f64);
    let short = hf.min(wf);
    let v = cfg.velocity_range;
    let blobs: Vec<Blob> = (0..cfg.blobs)
        .map(|_| Blob {
            y: rng.random_range(0.0..hf),
            x: rng.random_range(0.0..wf),
            vy: if v > 0.0 { rng.random_range(-v..=v) } else { 0.0 },
            vx: if v > 0.0 { rng.random_range(-v..=v) } else { 0.0 },
            sigma: rng.random_range(short / 16.0..short / 8.0).max(1.5),
            amplitude: rng.random_range(0.6..1.2),
        })
        .collect();

    let hw = h * w;
    let mut dynamic = vec![0.0f32; cfg.frames * 4 * hw];
    for t in 0..cfg.frames {
        let frame = &mut dynamic[t * 4 * hw..(t + 1) * 4 * hw];
        let (intensity, rest) = frame.split_at_mut(hw);
        for b in &blobs {
            let cy = b.y + b.vy * t as f64;
            let cx = b.x + b.vx * t as f64;
            let inv = 1.0 / (2.0 * b.sigma * b.sigma);
            for py in 0..h {
                let dy = wrap(py as f64 - cy, hf);
                for px in 0..w {
                    let dx = wrap(px as f64 - cx, wf);
                    intensity[py * w + px] += (b.amplitude * (-(dy * dy + dx * dx) * inv).exp()) as f32;
                }
            }
        }
        let thr = cfg.threshold as f32;
        let (rain, rest) = rest.split_at_mut(hw);
        let (smooth, mask) = rest.split_at_mut(hw);
        for i in 0..hw {
            let v = intensity[i];
            rain[i] = (v - thr).max(0.0);
            smooth[i] = 1.0 - (-v).exp();
            mask[i] = if v > thr { 1.0 } else { 0.0 };
        }
    }

    let mut statics = vec![0.0f32; 3 * hw];
    let phases: Vec<(f64, f64, f64)> = (0..4)
        .map(|k| {
            (
                rng.random_range(0.0..std::f64::consts::TAU),
                (k % 2 + 1) as f64,
                (k / 2 + 1) as f64,
            )
        })
        .collect();
    for py in 0..h {
        for px in 0..w {
            let i = py * w + px;
            statics[i] = py as f32 / (h - 1) as f32;
            statics[hw + i] = px as f32 / (w - 1) as f32;
            let (y, x) = (py as f64 / hf, px as f64 / wf);
            let e: f64 = phases
                .iter()
                .map(|&(p, fy, fx)| (std::f64::consts::TAU * (fy * y + fx * x) + p).sin() / (fy + fx))
                .sum();
            statics[2 * hw + i] = e as f32;
        }
    }
    FrameDataset::new(
        Tensor::new(&[cfg.frames, 4, h, w], dynamic)?,
        Tensor::new(&[3, h, w], statics)?,
        SYNTH_CHANNELS.iter().map(|s| s.to_string()).collect(),
        15,
    )
}
