//! Frame-sequence datasets, the STWF container, sample assembly and the
//! synthetic generator.
//!
//! STWF layout (little-endian):
//!
//! ```text
//! "STWF"                  4 bytes magic
//! version                 u16 (= 1)
//! T, C_dyn, C_static, H, W  u32 each
//! cadence_minutes         u16
//! name count              u16, then per name: u16 length + UTF-8
//! stats                   C_dyn x (f32 mean, f32 std)
//! dynamic payload         T*C_dyn*H*W f32, row-major
//! static payload          C_static*H*W f32
//! ```

mod synth;
mod window;

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{to_u32, Reader, Writer};
use crate::tensor::Tensor;

pub use synth::{gen_synthetic, SynthConfig, SYNTH_CHANNELS};
pub use window::{
    assemble_sample, denormalize, disassemble_sample, make_windows, normalize, parse_channels, split_windows, Sample, SplitConfig, StaticLayout, WindowSpec,
    Windows,
};

const MAGIC: &[u8; 4] = b"STWF";
const VERSION: u16 = 1;

/// Smallest standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: f32,
    pub std: f32,
}

/// Time-ordered multi-channel frames plus time-invariant channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDataset {
    /// `[T, C_dyn, H, W]`.
    dynamic: Tensor<f32>,
    /// `[C_static, H, W]`.
    statics: Tensor<f32>,
    /// Dynamic channel names followed by static ones.
    names: Vec<String>,
    stats: Vec<ChannelStats>,
    pub cadence_minutes: u16,
}

impl FrameDataset {
    /// Assembles a dataset and computes normalization statistics for every
    /// dynamic channel.
    pub fn new(dynamic: Tensor<f32>, statics: Tensor<f32>, names: Vec<String>, cadence_minutes: u16) -> Result<Self> {
        let c_dyn = dynamic.shape().get(1).copied().unwrap_or(0);
        let mut ds = Self {
            stats: vec![ChannelStats { mean: 0.0, std: 1.0 }; c_dyn],
            dynamic,
            statics,
            names,
            cadence_minutes,
        };
        ds.validate()?;
        ds.stats = (0..c_dyn).map(|c| compute_stats(&ds, c)).collect();
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dynamic.shape();
        let s = self.statics.shape();
        if d.len() != 4 || s.len() != 3 {
            return Err(Error::Data(format!(
                "dynamic must be [T,C,H,W] and static [C,H,W], got {d:?} and {s:?}"
            )));
        }
        if d[2..] != s[1..] {
            return Err(Error::Data(format!("dynamic frames are {:?} but static channels are {:?}", &d[2..], &s[1..])));
        }
        if self.names.len() != d[1] + s[0] {
            return Err(Error::Data(format!(
                "{} channel names for {} dynamic + {} static channels",
                self.names.len(),
                d[1],
                s[0]
            )));
        }
        if self.stats.len() != d[1] {
            return Err(Error::Data("one stats entry per dynamic channel is required".into()));
        }
        if let Some(c) = self.stats.iter().position(|s| !(s.std > 0.0) || !s.mean.is_finite()) {
            return Err(Error::Data(format!("channel {c} has invalid normalization stats")));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.dynamic.shape()[0]
    }

    pub fn dynamic_channels(&self) -> usize {
        self.dynamic.shape()[1]
    }

    pub fn static_channels(&self) -> usize {
        self.statics.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.dynamic.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.dynamic.shape()[3]
    }

    pub fn dynamic(&self) -> &Tensor<f32> {
        &self.dynamic
    }

    pub fn statics(&self) -> &Tensor<f32> {
        &self.statics
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn stats(&self) -> &[ChannelStats] {
        &self.stats
    }

    /// Replaces the normalization statistics (e.g. with training-split ones).
    pub fn set_stats(&mut self, stats: Vec<ChannelStats>) -> Result<()> {
        let old = std::mem::replace(&mut self.stats, stats);
        if let Err(e) = self.validate() {
            self.stats = old;
            return Err(e);
        }
        Ok(())
    }

    /// One `H x W` plane of dynamic channel `c` at frame `t`.
    pub fn plane(&self, t: usize, c: usize) -> &[f32] {
        let hw = self.height() * self.width();
        let start = (t * self.dynamic_channels() + c) * hw;
        &self.dynamic.data()[start..start + hw]
    }

    pub fn static_plane(&self, c: usize) -> &[f32] {
        let hw = self.height() * self.width();
        &self.statics.data()[c * hw..(c + 1) * hw]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        for n in [self.frames(), self.dynamic_channels(), self.static_channels(), self.height(), self.width()] {
            w.u32(to_u32(n, "extent")?);
        }
        w.u16(self.cadence_minutes);
        let count = u16::try_from(self.names.len()).map_err(|_| Error::Format("too many channel names".into()))?;
        w.u16(count);
        for n in &self.names {
            w.short_str(n)?;
        }
        for s in &self.stats {
            w.f32s(&[s.mean, s.std]);
        }
        w.f32s(self.dynamic.data());
        w.f32s(self.statics.data());
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not an STWF file (bad magic)".into()));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported STWF version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u32("header counts")? as usize;
        }
        let [t, c_dyn, c_static, h, w] = dims;
        let cadence_minutes = r.u16("cadence")?;
        let n_names = r.u16("name count")? as usize;
        let mut names = Vec::with_capacity(n_names);
        for _ in 0..n_names {
            names.push(r.short_str("channel name")?);
        }
        let mut stats = Vec::with_capacity(c_dyn);
        for _ in 0..c_dyn {
            let mean = r.f32("stats table")?;
            let std = r.f32("stats table")?;
            stats.push(ChannelStats { mean, std });
        }
        let numel = |parts: &[usize]| {
            parts
                .iter()
                .try_fold(1usize, |a, &b| a.checked_mul(b))
                .ok_or_else(|| Error::Format(format!("header extents {dims:?} overflow")))
        };
        let dyn_at = r.offset();
        let dynamic = r.f32s(numel(&[t, c_dyn, h, w])?, "dynamic payload")?;
        let statics = r.f32s(numel(&[c_static, h, w])?, "static payload")?;
        if r.remaining() != 0 {
            return Err(Error::Integrity {
                offset: r.offset() as u64,
                detail: format!("{} trailing bytes", r.remaining()),
            });
        }
        let ds = Self {
            dynamic: Tensor::new(&[t, c_dyn, h, w], dynamic)?,
            statics: Tensor::new(&[c_static, h, w], statics)?,
            names,
            stats,
            cadence_minutes,
        };
        ds.validate().map_err(|e| Error::Integrity {
            offset: dyn_at as u64,
            detail: e.to_string(),
        })?;
        Ok(ds)
    }
}

pub fn write_dataset(ds: &FrameDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<FrameDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    FrameDataset::from_bytes(&bytes)
}

/// Population mean and standard deviation of one dynamic channel over all
/// frames and pixels; the deviation is floored at [`STD_FLOOR`].
pub fn compute_stats(ds: &FrameDataset, channel: usize) -> ChannelStats {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for t in 0..ds.frames() {
        for &v in ds.plane(t, channel) {
            sum += v as f64;
            n += 1;
        }
    }
    if n == 0 {
        return ChannelStats { mean: 0.0, std: 1.0 };
    }
    let mean = sum / n as f64;
    let mut sq = 0.0f64;
    for t in 0..ds.frames() {
        for &v in ds.plane(t, channel) {
            sq += (v as f64 - mean).powi(2);
        }
    }
    let std = (sq / n as f64).sqrt().max(STD_FLOOR);
    ChannelStats {
        mean: mean as f32,
        std: std as f32,
    }
}
