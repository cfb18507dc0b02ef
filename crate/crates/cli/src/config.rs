//! Flat `key=value` run configuration: built-in defaults, then a config
//! file, then `--set` pairs, then dedicated flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use nowcast_core::data::{parse_channels, SplitConfig, StaticLayout, SynthConfig, WindowSpec};
use nowcast_core::nn::{ModelSpec, Variant};
use nowcast_core::optim::TrainConfig;
use nowcast_core::{parse_kv, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Global,
    /// Paths and selections given per command.
    Io,
    Synth,
    Window,
    Split,
    Model,
    /// Channel counts for `params`; other commands derive them from data.
    Shape,
    Train,
}

const IO_KEYS: [&str; 9] = [
    "data",
    "out",
    "checkpoints",
    "prediction",
    "window",
    "split",
    "ensembles",
    "frames",
    "channels",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    entries: IndexMap<String, (Group, String)>,
}

impl RunConfig {
    pub fn defaults() -> Self {
        let mut entries = IndexMap::new();
        let mut add = |k: &str, g: Group, v: String| {
            entries.insert(k.to_string(), (g, v));
        };
        add("seed", Group::Global, "0".into());
        add("threads", Group::Global, "0".into());
        add("dtype", Group::Global, "f32".into());
        for k in IO_KEYS {
            add(k, Group::Io, String::new());
        }
        let s = SynthConfig::default();
        add("frames_total", Group::Synth, s.frames.to_string());
        add("height", Group::Synth, s.height.to_string());
        add("width", Group::Synth, s.width.to_string());
        add("blobs", Group::Synth, s.blobs.to_string());
        add("velocity_range", Group::Synth, s.velocity_range.to_string());
        add("threshold", Group::Synth, s.threshold.to_string());
        add("t_in", Group::Window, "4".into());
        add("t_out", Group::Window, "8".into());
        add("target_channels", Group::Window, "all".into());
        add("static_layout", Group::Window, StaticLayout::Once.to_string());
        let sp = SplitConfig::default();
        add("valid_fraction", Group::Split, sp.valid_fraction.to_string());
        add("test_fraction", Group::Split, sp.test_fraction.to_string());
        let m = ModelSpec::new(Variant::SmaatUnet, 19, 128);
        for (k, v) in parse_kv(&m.to_kv()).expect("defaults parse") {
            let g = if k == "in_channels" || k == "out_channels" { Group::Shape } else { Group::Model };
            add(&k, g, v);
        }
        for (k, v) in TrainConfig::default().to_kv() {
            if k != "seed" {
                add(&k, Group::Train, v);
            }
        }
        Self { entries }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = if key == "lr" { "lr_max" } else { key };
        match self.entries.get_mut(key) {
            Some((_, v)) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `KEY=VALUE` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        &self.entries.get(key).unwrap_or_else(|| panic!("unregistered key {key}")).1
    }

    pub fn parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.get(key).is_empty()
    }

    /// A required path-like key.
    pub fn path(&self, key: &str) -> Result<PathBuf> {
        if !self.is_set(key) {
            return Err(Error::Config(format!("missing required `{key}`")));
        }
        Ok(PathBuf::from(self.get(key)))
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn dtype(&self) -> Result<Dtype> {
        match self.get("dtype") {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            v => Err(Error::Config(format!("dtype must be f32 or f64, got {v:?}"))),
        }
    }

    /// The keys of `groups` (non-empty IO keys only) as `key=value` pairs.
    pub fn pairs(&self, groups: &[Group]) -> Vec<(String, String)> {
        self.entries
            .iter()
            .filter(|(_, (g, v))| groups.contains(g) && (*g != Group::Io || !v.is_empty()))
            .map(|(k, (_, v))| (k.clone(), v.clone()))
            .collect()
    }

    pub fn resolved(&self, groups: &[Group]) -> String {
        self.pairs(groups).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn synth(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            seed: self.seed()?,
            frames: self.parse("frames_total")?,
            height: self.parse("height")?,
            width: self.parse("width")?,
            blobs: self.parse("blobs")?,
            velocity_range: self.parse("velocity_range")?,
            threshold: self.parse("threshold")?,
        })
    }

    pub fn window_spec(&self, c_dyn: usize) -> Result<WindowSpec> {
        let targets = match self.get("target_channels") {
            "all" => (0..c_dyn).collect(),
            v => parse_channels(v)?,
        };
        let mut spec = WindowSpec::new(self.parse("t_in")?, self.parse("t_out")?, targets);
        spec.static_layout = self.get("static_layout").parse()?;
        spec.validate(c_dyn)?;
        Ok(spec)
    }

    pub fn split(&self) -> Result<SplitConfig> {
        Ok(SplitConfig {
            valid_fraction: self.parse("valid_fraction")?,
            test_fraction: self.parse("test_fraction")?,
        })
    }

    pub fn model_spec(&self, in_channels: usize, out_channels: usize) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(self.get("variant").parse()?, in_channels, out_channels);
        for (k, v) in self.pairs(&[Group::Model]) {
            spec.set(&k, &v)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig {
            seed: self.seed()?,
            ..TrainConfig::default()
        };
        for (k, v) in self.pairs(&[Group::Train]) {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `0,2,5` or `3..7` (half-open) into indices.
pub fn parse_indices(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let n = |x: &str| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad range {s:?}")));
        return Ok((n(a)?..n(b)?).collect());
    }
    parse_channels(s)
}
