use std::fmt;
use std::str::FromStr;

use super::FrameDataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Where the static channels go in an assembled input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StaticLayout {
    /// Appended once after all input frames: `T_in*C_dyn + C_static` planes.
    Once,
    /// Repeated after every input frame: `T_in*(C_dyn + C_static)` planes.
    PerFrame,
}

impl fmt::Display for StaticLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StaticLayout::Once => "once",
            StaticLayout::PerFrame => "per_frame",
        })
    }
}

impl FromStr for StaticLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "once" => Ok(StaticLayout::Once),
            "per_frame" => Ok(StaticLayout::PerFrame),
            _ => Err(Error::Config(format!("static_layout must be once or per_frame, got {s:?}"))),
        }
    }
}

/// How samples are cut from a frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSpec {
    pub t_in: usize,
    pub t_out: usize,
    /// Dynamic channels predicted at every lead time.
    pub target_channels: Vec<usize>,
    pub static_layout: StaticLayout,
}

impl WindowSpec {
    pub fn new(t_in: usize, t_out: usize, target_channels: Vec<usize>) -> Self {
        Self {
            t_in,
            t_out,
            target_channels,
            static_layout: StaticLayout::Once,
        }
    }

    pub fn in_channels(&self, c_dyn: usize, c_static: usize) -> usize {
        match self.static_layout {
            StaticLayout::Once => self.t_in * c_dyn + c_static,
            StaticLayout::PerFrame => self.t_in * (c_dyn + c_static),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.t_out * self.target_channels.len()
    }

    /// Input plane holding dynamic channel `c` of input frame `f`.
    pub fn dynamic_plane(&self, f: usize, c: usize, c_dyn: usize, c_static: usize) -> usize {
        match self.static_layout {
            StaticLayout::Once => f * c_dyn + c,
            StaticLayout::PerFrame => f * (c_dyn + c_static) + c,
        }
    }

    pub fn validate(&self, c_dyn: usize) -> Result<()> {
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::Config("t_in and t_out must be >= 1".into()));
        }
        if self.target_channels.is_empty() {
            return Err(Error::Config("at least one target channel is required".into()));
        }
        for (i, &c) in self.target_channels.iter().enumerate() {
            if c >= c_dyn {
                return Err(Error::Config(format!("target channel {c} >= {c_dyn} dynamic channels")));
            }
            if self.target_channels[..i].contains(&c) {
                return Err(Error::Config(format!("target channel {c} listed twice")));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let targets: Vec<String> = self.target_channels.iter().map(usize::to_string).collect();
        vec![
            ("t_in".into(), self.t_in.to_string()),
            ("t_out".into(), self.t_out.to_string()),
            ("target_channels".into(), targets.join(",")),
            ("static_layout".into(), self.static_layout.to_string()),
        ]
    }

    /// Reads the keys written by [`WindowSpec::to_kv`], ignoring others.
    pub fn from_kv<'a>(kv: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut t_in = None;
        let mut t_out = None;
        let mut targets = None;
        let mut layout = StaticLayout::Once;
        let num = |k: &str, v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("{k}: bad integer {v:?}")));
        for (k, v) in kv {
            match k {
                "t_in" => t_in = Some(num(k, v)?),
                "t_out" => t_out = Some(num(k, v)?),
                "target_channels" => targets = Some(parse_channels(v)?),
                "static_layout" => layout = v.parse()?,
                _ => {}
            }
        }
        let missing = |k: &str| Error::Config(format!("window spec is missing {k}"));
        Ok(Self {
            t_in: t_in.ok_or_else(|| missing("t_in"))?,
            t_out: t_out.ok_or_else(|| missing("t_out"))?,
            target_channels: targets.ok_or_else(|| missing("target_channels"))?,
            static_layout: layout,
        })
    }
}

/// Parses a comma-separated channel list such as `0,1,2,3`.
pub fn parse_channels(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad channel list {s:?}")))
        })
        .collect()
}

/// Start indices of every complete window: `0 ..= T - (T_in + T_out)`.
pub fn make_windows(ds: &FrameDataset, t_in: usize, t_out: usize) -> Vec<usize> {
    let span = t_in + t_out;
    if t_in == 0 || t_out == 0 || ds.frames() < span {
        return Vec::new();
    }
    (0..=ds.frames() - span).collect()
}

/// One assembled model input and its target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[C_in, H, W]`, dynamic channels normalized, statics in `[0, 1]`.
    pub input: Tensor<f32>,
    /// `[T_out * n_targets, H, W]`, normalized.
    pub target: Tensor<f32>,
    pub start: usize,
}

/// Dynamic-channel normalization, computed in f64.
pub fn normalize(v: f32, mean: f32, std: f32) -> f32 {
    ((v as f64 - mean as f64) / std as f64) as f32
}

/// Inverse of the dynamic-channel normalization.
pub fn denormalize(v: f32, mean: f32, std: f32) -> f32 {
    (v as f64 * std as f64 + mean as f64) as f32
}

fn min_max_planes(ds: &FrameDataset) -> Vec<Vec<f32>> {
    (0..ds.static_channels())
        .map(|c| {
            let p = ds.static_plane(c);
            let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let range = (hi - lo) as f64;
            p.iter()
                .map(|&v| if range > 0.0 { ((v - lo) as f64 / range) as f32 } else { 0.0 })
                .collect()
        })
        .collect()
}

fn assemble_with(ds: &FrameDataset, statics: &[Vec<f32>], start: usize, spec: &WindowSpec) -> Result<Sample> {
    let (c_dyn, c_static) = (ds.dynamic_channels(), ds.static_channels());
    spec.validate(c_dyn)?;
    if start + spec.t_in + spec.t_out > ds.frames() {
        return Err(Error::Data(format!(
            "window start {start} out of range: needs {} frames, dataset has {}",
            start + spec.t_in + spec.t_out,
            ds.frames()
        )));
    }
    let hw = ds.height() * ds.width();
    let stats = ds.stats();
    let mut input = Vec::with_capacity(spec.in_channels(c_dyn, c_static) * hw);
    for f in 0..spec.t_in {
        for c in 0..c_dyn {
            let s = stats[c];
            input.extend(ds.plane(start + f, c).iter().map(|&v| normalize(v, s.mean, s.std)));
        }
        if spec.static_layout == StaticLayout::PerFrame || f + 1 == spec.t_in {
            statics.iter().for_each(|p| input.extend_from_slice(p));
        }
    }
    let mut target = Vec::with_capacity(spec.out_channels() * hw);
    for lead in 0..spec.t_out {
        for &c in &spec.target_channels {
            let s = stats[c];
            let t = start + spec.t_in + lead;
            target.extend(ds.plane(t, c).iter().map(|&v| normalize(v, s.mean, s.std)));
        }
    }
    let (h, w) = (ds.height(), ds.width());
    Ok(Sample {
        input: Tensor::new(&[input.len() / hw.max(1), h, w], input)?,
        target: Tensor::new(&[spec.out_channels(), h, w], target)?,
        start,
    })
}

/// Builds the sample whose first input frame is `start`.
///
/// Input planes: frame `start` (all dynamic channels), ..., frame
/// `start+T_in-1`, with static channels placed per [`StaticLayout`]. Target
/// planes: lead 1 (all target channels), ..., lead `T_out`.
pub fn assemble_sample(ds: &FrameDataset, start: usize, spec: &WindowSpec) -> Result<Sample> {
    assemble_with(ds, &min_max_planes(ds), start, spec)
}

/// Splits a sample back into `[T_in, C_dyn, H, W]` input frames and
/// `[T_out, n_targets, H, W]` target frames, still normalized.
pub fn disassemble_sample(
    sample: &Sample,
    spec: &WindowSpec,
    c_dyn: usize,
    c_static: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let shape = sample.input.shape();
    if shape.len() != 3 || shape[0] != spec.in_channels(c_dyn, c_static) {
        return Err(Error::Data(format!(
            "sample input {shape:?} does not have {} planes",
            spec.in_channels(c_dyn, c_static)
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let hw = h * w;
    let src = sample.input.data();
    let mut frames = Vec::with_capacity(spec.t_in * c_dyn * hw);
    for f in 0..spec.t_in {
        for c in 0..c_dyn {
            let p = spec.dynamic_plane(f, c, c_dyn, c_static);
            frames.extend_from_slice(&src[p * hw..(p + 1) * hw]);
        }
    }
    let frames = Tensor::new(&[spec.t_in, c_dyn, h, w], frames)?;
    let target = sample
        .target
        .clone()
        .reshape(&[spec.t_out, spec.target_channels.len(), h, w])?;
    Ok((frames, target))
}

/// Chronological train/validation/test split of window starts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            valid_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

/// Splits `starts` in time order. Windows straddling a boundary are dropped
/// so no frame is shared between two splits.
pub fn split_windows(
    starts: &[usize],
    t_in: usize,
    t_out: usize,
    cfg: SplitConfig,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let ok = |f: f64| (0.0..1.0).contains(&f);
    if !ok(cfg.valid_fraction) || !ok(cfg.test_fraction) || cfg.valid_fraction + cfg.test_fraction >= 1.0 {
        return Err(Error::Config(format!("invalid split fractions {cfg:?}")));
    }
    let n = starts.len();
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let n_valid = (n as f64 * cfg.valid_fraction).round() as usize;
    let gap = t_in + t_out - 1;
    let test_from = n - n_test;
    let mut end = if n_test > 0 { test_from.saturating_sub(gap) } else { test_from };
    let valid_from = end.saturating_sub(n_valid);
    let valid = starts[valid_from..end].to_vec();
    end = if n_valid > 0 { valid_from.saturating_sub(gap) } else { valid_from };
    Ok((starts[..end].to_vec(), valid, starts[test_from..].to_vec()))
}

/// A set of windows over one dataset, assembled on demand.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    ds: &'a FrameDataset,
    spec: WindowSpec,
    starts: Vec<usize>,
    statics: Vec<Vec<f32>>,
}

impl<'a> Windows<'a> {
    pub fn new(ds: &'a FrameDataset, spec: WindowSpec, starts: Vec<usize>) -> Result<Self> {
        spec.validate(ds.dynamic_channels())?;
        if let Some(&s) = starts.iter().find(|&&s| s + spec.t_in + spec.t_out > ds.frames()) {
            return Err(Error::Data(format!("window start {s} out of range")));
        }
        Ok(Self {
            statics: min_max_planes(ds),
            ds,
            spec,
            starts,
        })
    }

    /// Every complete window of `ds`.
    pub fn all(ds: &'a FrameDataset, spec: WindowSpec) -> Result<Self> {
        let starts = make_windows(ds, spec.t_in, spec.t_out);
        Self::new(ds, spec, starts)
    }

    pub fn dataset(&self) -> &'a FrameDataset {
        self.ds
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels(self.ds.dynamic_channels(), self.ds.static_channels())
    }

    pub fn sample(&self, i: usize) -> Result<Sample> {
        assemble_with(self.ds, &self.statics, self.starts[i], &self.spec)
    }

    /// Stacks the given window indices into `[B, C_in, H, W]` inputs and
    /// `[B, C_out, H, W]` targets.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w) = (self.ds.height(), self.ds.width());
        let mut x = Vec::new();
        let mut y = Vec::new();
        for &i in indices {
            let s = self.sample(i)?;
            x.extend(s.input.data().iter().map(|&v| T::of(v as f64)));
            y.extend(s.target.data().iter().map(|&v| T::of(v as f64)));
        }
        let b = indices.len();
        Ok((
            Tensor::new(&[b, self.in_channels(), h, w], x)?,
            Tensor::new(&[b, self.spec.out_channels(), h, w], y)?,
        ))
    }
}
