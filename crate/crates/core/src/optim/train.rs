use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, TrainConfig};
use crate::data::Windows;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Graph, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
}

impl EpochRecord {
    pub fn manifest_line(&self) -> String {
        let valid = self.valid_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.9e}"));
        format!("{} {:.9e} {} {:.9e}", self.epoch, self.train_loss, valid, self.lr)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Learning rate of every optimizer step.
    pub step_lrs: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl FitReport {
    pub fn manifest(&self) -> String {
        let mut s = String::from("# epoch train_loss valid_loss lr\n");
        for r in &self.history {
            let _ = writeln!(s, "{}", r.manifest_line());
        }
        s
    }
}

/// Side outputs of [`fit`].
#[derive(Default)]
pub struct FitOutputs<'a> {
    /// Directory for `epoch_NNN.smck` checkpoints and `manifest.txt`.
    pub out_dir: Option<&'a Path>,
    /// Extra metadata stored in every checkpoint.
    pub meta: IndexMap<String, String>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Mean squared error of `model` over every window, in inference mode.
pub fn mean_loss<T: Scalar>(model: &Model<T>, windows: &Windows<'_>, batch_size: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = windows.batch::<T>(chunk)?;
        let p = model.predict(&x)?;
        for (a, b) in p.data().iter().zip(y.data()) {
            let d = a.as_f64() - b.as_f64();
            sum += d * d;
        }
        count += y.numel();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Trains `model` with Adam on mini-batches drawn in a seeded shuffle order,
/// stepping the learning-rate schedule once per batch.
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    train: &Windows<'_>,
    valid: Option<&Windows<'_>>,
    cfg: &TrainConfig,
    mut out: FitOutputs<'_>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set has no windows".into()));
    }
    for w in std::iter::once(train).chain(valid) {
        let spec = model.spec();
        if w.in_channels() != spec.in_channels || w.spec().out_channels() != spec.out_channels {
            return Err(Error::Config(format!(
                "data provides {} input / {} output channels, model expects {} / {}",
                w.in_channels(),
                w.spec().out_channels(),
                spec.in_channels,
                spec.out_channels
            )));
        }
    }
    if let Some(dir) = out.out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut schedule = cfg.lr_schedule(steps_per_epoch);
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = FitReport::default();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        let mut lr = schedule.lr();
        for batch in order.chunks(cfg.batch_size) {
            lr = schedule.lr();
            let (x, y) = train.batch::<T>(batch)?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let yv = g.input(y);
            let fwd = model.forward(&mut g, xv, true)?;
            let loss = g.mse_loss(fwd.output, yv)?;
            let value = g.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                let tail = report.step_losses.len().saturating_sub(16);
                return Err(Error::NonFinite {
                    step,
                    lr,
                    loss: value,
                    history: report.step_losses[tail..].to_vec(),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Option<Vec<T>>> = fwd.params.iter().map(|&v| g.take_grad(v)).collect();
            drop(g);
            let mut params: Vec<(&str, &mut crate::tensor::Tensor<T>)> = Vec::new();
            for ((name, p), grad) in model.params_mut().zip(grads) {
                if let Some(grad) = grad {
                    p.set_grad(grad)?;
                }
                params.push((name.as_str(), p));
            }
            adam.step(params, lr)?;
            model.params_mut().for_each(|(_, p)| p.zero_grad());
            schedule.step();

            report.step_losses.push(value);
            report.step_lrs.push(lr);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
            step += 1;
        }
        let valid_loss = match valid {
            Some(v) if !v.is_empty() => Some(mean_loss(model, v, cfg.batch_size)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            valid_loss,
            lr,
        };
        if let Some(cb) = out.on_epoch.as_mut() {
            cb(&record);
        }
        report.history.push(record.clone());

        if let Some(dir) = out.out_dir {
            let every = cfg.checkpoint_every;
            if (every > 0 && epoch % every == 0) || epoch == cfg.epochs {
                let mut meta = out.meta.clone();
                for (k, v) in cfg.to_kv() {
                    meta.insert(format!("train.{k}"), v);
                }
                meta.insert("epoch".into(), epoch.to_string());
                meta.insert("step".into(), step.to_string());
                meta.insert("train_loss".into(), format!("{:e}", record.train_loss));
                if let Some(v) = record.valid_loss {
                    meta.insert("valid_loss".into(), format!("{v:e}"));
                }
                meta.insert("lr".into(), format!("{:e}", record.lr));
                let path = dir.join(format!("epoch_{epoch:03}.smck"));
                model.to_checkpoint(meta).write(&path)?;
                report.checkpoints.push(path);
            }
            std::fs::write(dir.join("manifest.txt"), report.manifest())?;
        }
    }
    Ok(report)
}
