//! Persistence baseline, MSE scoring, checkpoint ensembles and reports.
//!
//! All errors are measured on normalized target channels, the same units
//! the models are trained in.

use std::fmt::Write as _;

use crate::data::{WindowSpec, Windows};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{Scalar, Tensor};

/// Something that maps a `[B, C_in, H, W]` batch to `[B, C_out, H, W]`.
pub trait Forecaster {
    fn forecast(&self, input: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<T: Scalar> Forecaster for Model<T> {
    fn forecast(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.predict(&input.cast::<T>())?.cast())
    }
}

/// Repeats the last input frame's target channels for every lead time.
/// Accepts a single `[C_in, H, W]` sample or a `[B, C_in, H, W]` batch.
pub fn persistence_predict(
    input: &Tensor<f32>,
    spec: &WindowSpec,
    c_dyn: usize,
    c_static: usize,
) -> Result<Tensor<f32>> {
    let shape = input.shape();
    let (batch, planes, h, w) = match *shape {
        [c, h, w] => (None, c, h, w),
        [b, c, h, w] => (Some(b), c, h, w),
        _ => return Err(Error::dim("persistence", "rank", format!("expected 3-D or 4-D input, got {shape:?}"))),
    };
    let expected = spec.in_channels(c_dyn, c_static);
    if planes != expected {
        return Err(Error::dim(
            "persistence",
            "channel",
            format!("input has {planes} planes, layout expects {expected}"),
        ));
    }
    spec.validate(c_dyn)?;
    let hw = h * w;
    let data = input.data();
    let mut out = Vec::with_capacity(batch.unwrap_or(1) * spec.out_channels() * hw);
    for b in 0..batch.unwrap_or(1) {
        let sample = &data[b * planes * hw..(b + 1) * planes * hw];
        for _ in 0..spec.t_out {
            for &c in &spec.target_channels {
                let p = spec.dynamic_plane(spec.t_in - 1, c, c_dyn, c_static);
                out.extend_from_slice(&sample[p * hw..(p + 1) * hw]);
            }
        }
    }
    match batch {
        None => Tensor::new(&[spec.out_channels(), h, w], out),
        Some(b) => Tensor::new(&[b, spec.out_channels(), h, w], out),
    }
}

/// Mean squared error over every element.
pub fn score(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "score",
            "shape",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.numel() == 0 {
        return Err(Error::Config("score of an empty tensor".into()));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// `raw / persistence_raw`; `None` when the persistence error is zero.
pub fn normalized_score(raw: f64, persistence_raw: f64) -> Option<f64> {
    (persistence_raw > 0.0).then(|| raw / persistence_raw)
}

/// Unweighted elementwise mean of the members' predictions.
pub fn ensemble_predict(members: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
    if let Some(m) = members.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::dim(
            "ensemble",
            "shape",
            format!("member shapes {:?} and {:?} differ", first.shape(), m.shape()),
        ));
    }
    let n = members.len() as f64;
    Ok(Tensor::from_fn(first.shape(), |i| {
        (members.iter().map(|m| m.data()[i] as f64).sum::<f64>() / n) as f32
    }))
}

/// Squared-error sums split by lead time.
#[derive(Clone, Debug)]
pub struct LeadAccumulator {
    n_targets: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl LeadAccumulator {
    pub fn new(t_out: usize, n_targets: usize) -> Self {
        Self {
            n_targets,
            sums: vec![0.0; t_out],
            counts: vec![0; t_out],
        }
    }

    /// Adds a `[B, T_out * n_targets, H, W]` (or unbatched) prediction.
    pub fn add(&mut self, pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::dim("score", "shape", format!("{:?} vs {:?}", pred.shape(), target.shape())));
        }
        let shape = pred.shape();
        let rank = shape.len();
        if rank < 3 {
            return Err(Error::dim("score", "rank", format!("{shape:?}")));
        }
        let planes = shape[rank - 3];
        let t_out = self.sums.len();
        if planes != t_out * self.n_targets {
            return Err(Error::dim(
                "score",
                "channel",
                format!("{planes} planes, expected {t_out} leads x {} targets", self.n_targets),
            ));
        }
        let hw = shape[rank - 2] * shape[rank - 1];
        for (plane, (p, t)) in pred.data().chunks(hw).zip(target.data().chunks(hw)).enumerate() {
            let lead = (plane % planes) / self.n_targets;
            self.sums[lead] += p
                .iter()
                .zip(t)
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum::<f64>();
            self.counts[lead] += hw;
        }
        Ok(())
    }

    pub fn per_lead(&self) -> Vec<f64> {
        self.sums
            .iter()
            .zip(&self.counts)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    pub fn raw(&self) -> f64 {
        let n: usize = self.counts.iter().sum();
        if n == 0 {
            0.0
        } else {
            self.sums.iter().sum::<f64>() / n as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RowKind {
    Persistence,
    Model,
    Ensemble { members: Vec<String> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub kind: RowKind,
    pub raw_mse: f64,
    /// `None` when the persistence error is zero.
    pub normalized: Option<f64>,
    pub per_lead: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub samples: usize,
    /// Set when the persistence error is zero and scores cannot be normalized.
    pub normalization_undefined: bool,
}

impl EvalReport {
    pub fn persistence(&self) -> &ReportRow {
        &self.rows[0]
    }

    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>10}", "Model", "Test MSE", "Normalized");
        let _ = writeln!(s, "{}", "-".repeat(width + 26));
        for r in &self.rows {
            let norm = r.normalized.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
            let _ = writeln!(s, "{:<width$}  {:>12.6}  {:>10}", r.name, r.raw_mse, norm);
        }
        let _ = writeln!(s, "\n{} test windows", self.samples);
        if self.normalization_undefined {
            let _ = writeln!(s, "persistence MSE is zero: normalized scores are undefined");
        }
        s
    }

    /// `name,kind,members,raw_mse,normalized,lead_1,...`
    pub fn to_csv(&self) -> String {
        let leads = self.rows.first().map_or(0, |r| r.per_lead.len());
        let mut s = String::from("name,kind,members,raw_mse,normalized");
        for l in 1..=leads {
            let _ = write!(s, ",lead_{l}");
        }
        s.push('\n');
        for r in &self.rows {
            let (kind, members) = match &r.kind {
                RowKind::Persistence => ("persistence", String::new()),
                RowKind::Model => ("model", String::new()),
                RowKind::Ensemble { members } => ("ensemble", members.join(";")),
            };
            let norm = r.normalized.map_or_else(String::new, |v| format!("{v:e}"));
            let _ = write!(s, "{},{kind},{members},{:e},{norm}", r.name, r.raw_mse);
            for v in &r.per_lead {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

/// An ensemble over a subset of the evaluated models, by index.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub name: String,
    pub members: Vec<usize>,
}

/// Scores persistence, every model and every ensemble over `windows`.
pub fn evaluate(
    models: &[(&str, &dyn Forecaster)],
    ensembles: &[EnsembleSpec],
    windows: &Windows<'_>,
    batch_size: usize,
) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Config("evaluation set has no windows".into()));
    }
    for e in ensembles {
        if e.members.is_empty() || e.members.iter().any(|&m| m >= models.len()) {
            return Err(Error::Config(format!("ensemble {} has invalid members {:?}", e.name, e.members)));
        }
    }
    let spec = windows.spec();
    let ds = windows.dataset();
    let (c_dyn, c_static) = (ds.dynamic_channels(), ds.static_channels());
    let acc = || LeadAccumulator::new(spec.t_out, spec.target_channels.len());
    let mut pers = acc();
    let mut model_acc: Vec<LeadAccumulator> = models.iter().map(|_| acc()).collect();
    let mut ens_acc: Vec<LeadAccumulator> = ensembles.iter().map(|_| acc()).collect();

    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = windows.batch::<f32>(chunk)?;
        pers.add(&persistence_predict(&x, spec, c_dyn, c_static)?, &y)?;
        let preds = models
            .iter()
            .map(|(_, m)| m.forecast(&x))
            .collect::<Result<Vec<_>>>()?;
        for (a, p) in model_acc.iter_mut().zip(&preds) {
            a.add(p, &y)?;
        }
        for (a, e) in ens_acc.iter_mut().zip(ensembles) {
            let members: Vec<Tensor<f32>> = e.members.iter().map(|&m| preds[m].clone()).collect();
            a.add(&ensemble_predict(&members)?, &y)?;
        }
    }

    let p_raw = pers.raw();
    let undefined = !(p_raw > 0.0);
    let mut rows = vec![ReportRow {
        name: "Persistence".into(),
        kind: RowKind::Persistence,
        raw_mse: p_raw,
        normalized: Some(1.0),
        per_lead: pers.per_lead(),
    }];
    let row = |name: String, kind: RowKind, a: &LeadAccumulator| ReportRow {
        name,
        kind,
        raw_mse: a.raw(),
        normalized: normalized_score(a.raw(), p_raw),
        per_lead: a.per_lead(),
    };
    for ((name, _), a) in models.iter().zip(&model_acc) {
        rows.push(row(name.to_string(), RowKind::Model, a));
    }
    for (e, a) in ensembles.iter().zip(&ens_acc) {
        let members = e.members.iter().map(|&m| models[m].0.to_string()).collect();
        rows.push(row(e.name.clone(), RowKind::Ensemble { members }, a));
    }
    Ok(EvalReport {
        rows,
        samples: windows.len(),
        normalization_undefined: undefined,
    })
}

/// Spearman rank correlation (average ranks for ties); `None` if either
/// side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 35.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0], &[5.0, 5.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 3.0, 4.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn symmetric_members_cancel() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5);
        let p = Tensor::from_fn(&[2, 3], |i| (i * i) as f32 * 0.25);
        let q = Tensor::from_fn(&[2, 3], |i| 2.0 * t.data()[i] - p.data()[i]);
        let e = ensemble_predict(&[p.clone(), q]).unwrap();
        assert_eq!(score(&e, &t).unwrap(), 0.0);
        assert_eq!(ensemble_predict(&[p.clone()]).unwrap(), p);
        assert!(ensemble_predict(&[]).is_err());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalized_score(2.0, 2.0), Some(1.0));
        assert_eq!(normalized_score(0.0, 2.0), Some(0.0));
        assert_eq!(normalized_score(1.0, 0.0), None);
    }
}
