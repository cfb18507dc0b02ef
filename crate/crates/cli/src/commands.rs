use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use nowcast_core::data::{
    denormalize, gen_synthetic, make_windows, normalize, read_dataset, split_windows, write_dataset, ChannelStats,
    FrameDataset, SplitConfig, WindowSpec, Windows,
};
use nowcast_core::eval::{evaluate as run_eval, EnsembleSpec, EvalReport, Forecaster};
use nowcast_core::nn::{Checkpoint, Model, Variant};
use nowcast_core::optim::{fit, FitOutputs};
use nowcast_core::{Error, Result, Scalar, Tensor};

use crate::config::{parse_indices, Dtype, Group, RunConfig};

const EVAL_BATCH: usize = 16;

fn write_config(path: &Path, cfg: &RunConfig, groups: &[Group]) -> Result<()> {
    std::fs::write(path, cfg.resolved(groups))?;
    Ok(())
}

/// `<file>.config` next to a single-file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn check_spatial(op: &'static str, ds: &FrameDataset, multiple: usize) -> Result<()> {
    for (axis, n) in [("height", ds.height()), ("width", ds.width())] {
        if n % multiple != 0 {
            return Err(Error::Dimension {
                op,
                axis,
                detail: format!("{n} is not a multiple of {multiple}; pad or crop the dataset"),
            });
        }
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let ds = gen_synthetic(&cfg.synth()?)?;
    write_dataset(&ds, &out)?;
    write_config(&sidecar(&out), cfg, &[Group::Global, Group::Io, Group::Synth])?;
    println!(
        "wrote {}: {} frames, {}x{}, channels {}",
        out.display(),
        ds.frames(),
        ds.height(),
        ds.width(),
        ds.names().join(",")
    );
    Ok(())
}

fn stats_string(stats: &[ChannelStats]) -> String {
    stats.iter().map(|s| format!("{}:{}", s.mean, s.std)).collect::<Vec<_>>().join(",")
}

fn parse_stats(s: &str) -> Result<Vec<ChannelStats>> {
    let bad = || Error::Data(format!("bad stats entry in checkpoint: {s:?}"));
    s.split(',')
        .map(|p| {
            let (m, d) = p.split_once(':').ok_or_else(bad)?;
            Ok(ChannelStats {
                mean: m.parse().map_err(|_| bad())?,
                std: d.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let data = cfg.path("data")?;
    let out = cfg.path("out")?;
    // everything is checked before the output directory is touched
    let ds = read_dataset(&data)?;
    let spec = cfg.window_spec(ds.dynamic_channels())?;
    let starts = make_windows(&ds, spec.t_in, spec.t_out);
    let (tr, va, te) = split_windows(&starts, spec.t_in, spec.t_out, cfg.split()?)?;
    let train_w = Windows::new(&ds, spec.clone(), tr)?;
    let valid_w = Windows::new(&ds, spec.clone(), va)?;
    if train_w.is_empty() {
        return Err(Error::Config(format!(
            "no training windows: {} frames, window span {}",
            ds.frames(),
            spec.t_in + spec.t_out
        )));
    }
    let mspec = cfg.model_spec(train_w.in_channels(), spec.out_channels())?;
    check_spatial("train", &ds, mspec.spatial_multiple())?;
    let tcfg = cfg.train_config()?;
    let groups = [Group::Global, Group::Io, Group::Window, Group::Split, Group::Model, Group::Train];

    std::fs::create_dir_all(&out)?;
    write_config(&out.join("config.txt"), cfg, &groups)?;
    let mut meta = IndexMap::new();
    for (k, v) in cfg.pairs(&[Group::Global, Group::Window, Group::Split]) {
        meta.insert(format!("run.{k}"), v);
    }
    // resolved targets, so "all" is pinned to this dataset
    meta.insert("run.target_channels".into(), spec.to_kv()[2].1.clone());
    meta.insert("data.names".into(), ds.names().join(","));
    meta.insert("data.channels".into(), format!("{},{}", ds.dynamic_channels(), ds.static_channels()));
    meta.insert("data.stats".into(), stats_string(ds.stats()));

    eprintln!(
        "training {} ({} parameters) on {} windows, validating on {}, {} held out",
        mspec.variant,
        Model::<f32>::build(&mspec, 0)?.param_count(),
        train_w.len(),
        valid_w.len(),
        te.len()
    );
    let mut progress = |r: &nowcast_core::optim::EpochRecord| {
        let valid = r.valid_loss.map_or_else(|| "-".into(), |v| format!("{v:.6}"));
        eprintln!("epoch {:>3}  train {:.6}  valid {valid}  lr {:.3e}", r.epoch, r.train_loss, r.lr);
    };
    let outputs = FitOutputs {
        out_dir: Some(&out),
        meta,
        on_epoch: Some(&mut progress),
    };
    let valid = (!valid_w.is_empty()).then_some(&valid_w);
    let seed = cfg.seed()?;
    let report = match cfg.dtype()? {
        Dtype::F32 => fit(&mut Model::<f32>::build(&mspec, seed)?, &train_w, valid, &tcfg, outputs)?,
        Dtype::F64 => fit(&mut Model::<f64>::build(&mspec, seed)?, &train_w, valid, &tcfg, outputs)?,
    };
    for p in &report.checkpoints {
        println!("{}", p.display());
    }
    Ok(())
}

/// A checkpoint plus the data layout it was trained with.
struct Trained {
    path: PathBuf,
    ck: Checkpoint,
    window: WindowSpec,
    split: SplitConfig,
    names: String,
    channels: (usize, usize),
    stats: Vec<ChannelStats>,
}

impl Trained {
    fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        let get = |k: &str| {
            ck.meta
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Data(format!("{}: checkpoint metadata lacks {k}", path.display())))
        };
        let window = WindowSpec::from_kv(
            ck.meta
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("run.").map(|k| (k, v.as_str()))),
        )?;
        let mut run = RunConfig::defaults();
        run.set("valid_fraction", get("run.valid_fraction")?)?;
        run.set("test_fraction", get("run.test_fraction")?)?;
        let ch: Vec<usize> = parse_indices(get("data.channels")?)?;
        if ch.len() != 2 {
            return Err(Error::Data("bad data.channels in checkpoint".into()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            names: get("data.names")?.to_string(),
            channels: (ch[0], ch[1]),
            stats: parse_stats(get("data.stats")?)?,
            split: run.split()?,
            window,
            ck,
        })
    }

    fn label(&self) -> String {
        let stem = self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        format!("{}:{stem}", self.ck.spec.variant)
    }

    /// Checks `ds` against the training layout and applies the training
    /// normalization statistics.
    fn adopt(&self, op: &'static str, ds: &mut FrameDataset) -> Result<()> {
        let found = (ds.dynamic_channels(), ds.static_channels());
        if found != self.channels || ds.names().join(",") != self.names {
            return Err(Error::Dimension {
                op,
                axis: "channel",
                detail: format!(
                    "checkpoint expects {} dynamic + {} static channels [{}], dataset has {} + {} [{}]",
                    self.channels.0,
                    self.channels.1,
                    self.names,
                    found.0,
                    found.1,
                    ds.names().join(",")
                ),
            });
        }
        check_spatial(op, ds, self.ck.spec.spatial_multiple())?;
        ds.set_stats(self.stats.clone())
    }

    fn same_layout(&self, other: &Trained) -> bool {
        self.window == other.window
            && self.split == other.split
            && self.names == other.names
            && self.stats == other.stats
    }
}

fn boxed_model(t: &Trained, dtype: Dtype) -> Result<Box<dyn Forecaster>> {
    Ok(match dtype {
        Dtype::F32 => Box::new(Model::<f32>::from_checkpoint(&t.ck)?),
        Dtype::F64 => Box::new(Model::<f64>::from_checkpoint(&t.ck)?),
    })
}

fn predict_window<T: Scalar>(t: &Trained, ds: &FrameDataset, start: usize) -> Result<Tensor<f32>> {
    let model = Model::<T>::from_checkpoint(&t.ck)?;
    let w = Windows::new(ds, t.window.clone(), vec![start])?;
    let (x, _) = w.batch::<T>(&[0])?;
    Ok(model.predict(&x)?.cast())
}

pub fn predict(cfg: &RunConfig) -> Result<()> {
    let ck_path = cfg.path("checkpoints")?;
    let out = cfg.path("out")?;
    let start: usize = cfg.path("window").and_then(|_| cfg.parse("window"))?;
    let trained = Trained::load(&ck_path)?;
    let mut ds = read_dataset(cfg.path("data")?)?;
    trained.adopt("predict", &mut ds)?;
    let pred = match cfg.dtype()? {
        Dtype::F32 => predict_window::<f32>(&trained, &ds, start)?,
        Dtype::F64 => predict_window::<f64>(&trained, &ds, start)?,
    };
    let spec = &trained.window;
    let n = spec.target_channels.len();
    let hw = ds.height() * ds.width();
    let mut data = pred.into_data();
    for (p, plane) in data.chunks_mut(hw).enumerate() {
        let s = trained.stats[spec.target_channels[p % n]];
        plane.iter_mut().for_each(|v| *v = denormalize(*v, s.mean, s.std));
    }
    let names = spec.target_channels.iter().map(|&c| ds.names()[c].clone()).collect();
    let frames = Tensor::new(&[spec.t_out, n, ds.height(), ds.width()], data)?;
    let fragment = FrameDataset::new(frames, Tensor::zeros(&[0, ds.height(), ds.width()]), names, ds.cadence_minutes)?;
    write_dataset(&fragment, &out)?;
    write_config(&sidecar(&out), cfg, &[Group::Global, Group::Io])?;
    println!(
        "wrote {}: frames {}..{} of window {start}, channels {}",
        out.display(),
        start + spec.t_in,
        start + spec.t_in + spec.t_out,
        fragment.names().join(",")
    );
    Ok(())
}

/// Replays a saved prediction fragment, re-normalized, as a forecast.
struct Replay(Tensor<f32>);

impl Forecaster for Replay {
    fn forecast(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        match input.shape() {
            [1, ..] => Ok(self.0.clone()),
            s => Err(Error::Config(format!("a saved prediction covers one window, got batch {s:?}"))),
        }
    }
}

fn load_replay(path: &Path, t: &Trained, ds: &FrameDataset) -> Result<Replay> {
    let frag = read_dataset(path)?;
    let spec = &t.window;
    let n = spec.target_channels.len();
    let want = [spec.t_out, n, ds.height(), ds.width()];
    let got = [frag.frames(), frag.dynamic_channels(), frag.height(), frag.width()];
    if got != want {
        return Err(Error::Dimension {
            op: "evaluate",
            axis: "shape",
            detail: format!("prediction {} is {got:?}, expected {want:?}", path.display()),
        });
    }
    let hw = ds.height() * ds.width();
    let mut data = frag.dynamic().data().to_vec();
    for (p, plane) in data.chunks_mut(hw).enumerate() {
        let s = t.stats[spec.target_channels[p % n]];
        plane.iter_mut().for_each(|v| *v = normalize(*v, s.mean, s.std));
    }
    Ok(Replay(Tensor::new(&[1, spec.out_channels(), ds.height(), ds.width()], data)?))
}

fn parse_ensembles(s: &str, members: usize) -> Result<Vec<EnsembleSpec>> {
    s.split(';')
        .filter(|e| !e.trim().is_empty())
        .map(|e| {
            let (name, idx) = e
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("ensemble must be NAME=i,j,..., got {e:?}")))?;
            let members_idx = parse_indices(idx)?;
            if let Some(bad) = members_idx.iter().find(|&&m| m >= members) {
                return Err(Error::Config(format!("ensemble {name}: no checkpoint #{bad} ({members} given)")));
            }
            Ok(EnsembleSpec {
                name: name.trim().to_string(),
                members: members_idx,
            })
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let paths: Vec<PathBuf> = cfg.path("checkpoints")?.to_string_lossy().split(',').map(PathBuf::from).collect();
    let trained = paths.iter().map(|p| Trained::load(p)).collect::<Result<Vec<_>>>()?;
    let first = &trained[0];
    if let Some(t) = trained.iter().find(|t| !t.same_layout(first)) {
        return Err(Error::Config(format!(
            "{} and {} were trained on different window layouts or statistics",
            first.path.display(),
            t.path.display()
        )));
    }
    let mut ds = read_dataset(cfg.path("data")?)?;
    first.adopt("evaluate", &mut ds)?;

    let spec = first.window.clone();
    let starts = if cfg.is_set("window") {
        vec![cfg.parse::<usize>("window")?]
    } else {
        let all = make_windows(&ds, spec.t_in, spec.t_out);
        let (tr, va, te) = split_windows(&all, spec.t_in, spec.t_out, first.split)?;
        match cfg.get("split") {
            "" | "test" => te,
            "valid" => va,
            "train" => tr,
            "all" => all,
            s => return Err(Error::Config(format!("split must be train, valid, test or all, got {s:?}"))),
        }
    };
    let windows = Windows::new(&ds, spec, starts)?;

    let report: EvalReport = if cfg.is_set("prediction") {
        if windows.len() != 1 {
            return Err(Error::Config("evaluating a saved prediction needs `window`".into()));
        }
        let replay = load_replay(&cfg.path("prediction")?, first, &ds)?;
        run_eval(&[("prediction", &replay)], &[], &windows, 1)?
    } else {
        let dtype = cfg.dtype()?;
        let models = trained.iter().map(|t| boxed_model(t, dtype)).collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = trained.iter().map(Trained::label).collect();
        let refs: Vec<(&str, &dyn Forecaster)> = labels.iter().map(String::as_str).zip(models.iter().map(|m| m.as_ref())).collect();
        let mut ensembles = parse_ensembles(cfg.get("ensembles"), models.len())?;
        if ensembles.is_empty() && models.len() >= 2 {
            ensembles.push(EnsembleSpec {
                name: "Ensemble".into(),
                members: (0..models.len()).collect(),
            });
        }
        run_eval(&refs, &ensembles, &windows, EVAL_BATCH)?
    };

    std::fs::create_dir_all(&out)?;
    let table = report.to_table();
    std::fs::write(out.join("report.txt"), &table)?;
    std::fs::write(out.join("report.csv"), report.to_csv())?;
    write_config(&out.join("config.txt"), cfg, &[Group::Global, Group::Io])?;
    print!("{table}");
    Ok(())
}

pub fn params(cfg: &RunConfig, all: bool) -> Result<()> {
    let (cin, cout) = (cfg.parse("in_channels")?, cfg.parse("out_channels")?);
    let base = cfg.model_spec(cin, cout)?;
    let variants: Vec<Variant> = if all { Variant::ALL.to_vec() } else { vec![base.variant] };
    let mut rows = Vec::new();
    for v in variants {
        let spec = nowcast_core::nn::ModelSpec { variant: v, ..base.clone() };
        let model = Model::<f32>::build(&spec, 0)?;
        rows.push((v, model.param_count(), model.layer_counts()));
    }
    rows.sort_by_key(|r| r.1);
    let mut s = String::new();
    if !all {
        let (v, total, layers) = &rows[0];
        let _ = writeln!(s, "{v} (in {cin}, out {cout}, base width {}, depth {})", base.base_width, base.depth);
        for l in layers {
            let _ = writeln!(s, "  {:<14} {:>12}", l.layer, l.count);
        }
        let _ = writeln!(s, "  {:<14} {:>12}", "total", total);
    } else {
        let _ = writeln!(s, "{:<12} {:>12}", "variant", "parameters");
        for (v, total, _) in &rows {
            let _ = writeln!(s, "{:<12} {:>12}  {:.2}M", v.name(), total, *total as f64 / 1e6);
        }
    }
    print!("{s}");
    Ok(())
}

/// Binary PGM of one plane, min-max scaled; a constant plane renders as 0.
pub fn pgm(plane: &[f32], h: usize, w: usize) -> (Vec<u8>, f32, f32) {
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = hi as f64 - lo as f64;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| {
        if range > 0.0 {
            ((v as f64 - lo as f64) / range * 255.0).round() as u8
        } else {
            0
        }
    }));
    (out, lo, hi)
}

pub fn render(cfg: &RunConfig) -> Result<()> {
    let out = cfg.path("out")?;
    let ds = read_dataset(cfg.path("data")?)?;
    let frames = match cfg.get("frames") {
        "" | "all" => (0..ds.frames()).collect(),
        v => parse_indices(v)?,
    };
    let channels = match cfg.get("channels") {
        "" | "all" => (0..ds.dynamic_channels()).collect(),
        v => parse_indices(v)?,
    };
    if let Some(t) = frames.iter().find(|&&t| t >= ds.frames()) {
        return Err(Error::Config(format!("frame {t} out of range: dataset has {} frames", ds.frames())));
    }
    if let Some(c) = channels.iter().find(|&&c| c >= ds.dynamic_channels()) {
        return Err(Error::Config(format!(
            "channel {c} out of range: dataset has {} dynamic channels",
            ds.dynamic_channels()
        )));
    }
    std::fs::create_dir_all(&out)?;
    let mut scale = String::from("# file min max (pixel 0 = min, 255 = max; constant planes are all 0)\n");
    for &t in &frames {
        for &c in &channels {
            let (bytes, lo, hi) = pgm(ds.plane(t, c), ds.height(), ds.width());
            let name = format!("t{t:04}_c{c}_{}.pgm", ds.names()[c]);
            std::fs::write(out.join(&name), bytes)?;
            let _ = writeln!(scale, "{name} {lo} {hi}");
        }
    }
    std::fs::write(out.join("scale.txt"), scale)?;
    write_config(&out.join("config.txt"), cfg, &[Group::Global, Group::Io])?;
    println!("rendered {} panels into {}", frames.len() * channels.len(), out.display());
    Ok(())
}
