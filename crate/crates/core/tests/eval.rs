use nowcast_core::data::{gen_synthetic, make_windows, FrameDataset, StaticLayout, SynthConfig, WindowSpec, Windows};
use nowcast_core::eval::{
    ensemble_predict, evaluate, persistence_predict, score, spearman, EnsembleSpec, Forecaster, RowKind,
};
use nowcast_core::nn::{Model, ModelSpec, Variant};
use nowcast_core::{Error, Result, Tensor};
use nowcast_oracle::Seeded;
use proptest::prelude::*;

fn synth(velocity: f64, seed: u64) -> FrameDataset {
    gen_synthetic(&SynthConfig {
        seed,
        frames: 30,
        height: 16,
        width: 16,
        velocity_range: velocity,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Returns a fixed per-call offset of the persistence forecast.
struct Shifted {
    spec: WindowSpec,
    c_dyn: usize,
    c_static: usize,
    offset: f32,
}

impl Forecaster for Shifted {
    fn forecast(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let p = persistence_predict(input, &self.spec, self.c_dyn, self.c_static)?;
        Ok(Tensor::from_fn(p.shape(), |i| p.data()[i] + self.offset))
    }
}

#[test]
fn persistence_row_is_exactly_one() {
    for seed in [1, 2, 3] {
        let ds = synth(1.0, seed);
        let w = Windows::all(&ds, WindowSpec::new(3, 4, vec![0, 1])).unwrap();
        let r = evaluate(&[], &[], &w, 5).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.persistence().kind, RowKind::Persistence);
        assert_eq!(r.persistence().normalized, Some(1.0));
        assert!(r.persistence().raw_mse > 0.0);
        assert!(!r.normalization_undefined);
        assert_eq!(r.samples, make_windows(&ds, 3, 4).len());
    }
}

#[test]
fn zero_velocity_flags_undefined_normalization() {
    let ds = synth(0.0, 4);
    let spec = WindowSpec::new(2, 3, vec![0, 1, 2, 3]);
    let w = Windows::all(&ds, spec.clone()).unwrap();
    let m = Shifted { spec, c_dyn: 4, c_static: 3, offset: 0.5 };
    let r = evaluate(&[("shifted", &m)], &[], &w, 4).unwrap();
    assert_eq!(r.persistence().raw_mse, 0.0);
    assert!(r.normalization_undefined);
    assert_eq!(r.row("shifted").unwrap().normalized, None);
    assert!((r.row("shifted").unwrap().raw_mse - 0.25).abs() < 1e-6);
    assert!(r.to_table().contains("undefined"));
}

#[test]
fn per_lead_curve_averages_to_raw() {
    let ds = synth(1.5, 5);
    let spec = WindowSpec::new(2, 6, vec![0, 2]);
    let w = Windows::all(&ds, spec).unwrap();
    let r = evaluate(&[], &[], &w, 3).unwrap();
    let row = r.persistence();
    assert_eq!(row.per_lead.len(), 6);
    let mean = row.per_lead.iter().sum::<f64>() / 6.0;
    assert!((mean - row.raw_mse).abs() < 1e-6);
    // the error of a moving field grows with the lead time
    assert!(row.per_lead[5] > row.per_lead[0]);
}

#[test]
fn ensemble_rows_and_output_formats() {
    let ds = synth(1.0, 6);
    let spec = WindowSpec::new(2, 2, vec![0]);
    let w = Windows::all(&ds, spec.clone()).unwrap();
    let a = Shifted { spec: spec.clone(), c_dyn: 4, c_static: 3, offset: 0.3 };
    let b = Shifted { spec, c_dyn: 4, c_static: 3, offset: -0.3 };
    let ens = [
        EnsembleSpec { name: "pair".into(), members: vec![0, 1] },
        EnsembleSpec { name: "solo".into(), members: vec![0] },
    ];
    let r = evaluate(&[("a", &a), ("b", &b)], &ens, &w, 7).unwrap();
    let names: Vec<_> = r.rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["Persistence", "a", "b", "pair", "solo"]);
    // symmetric offsets cancel in the mean
    assert!((r.row("pair").unwrap().raw_mse - r.persistence().raw_mse).abs() < 1e-9);
    assert_eq!(r.row("solo").unwrap().raw_mse, r.row("a").unwrap().raw_mse);
    assert_eq!(
        r.row("pair").unwrap().kind,
        RowKind::Ensemble { members: vec!["a".into(), "b".into()] }
    );
    let csv = r.to_csv();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "name,kind,members,raw_mse,normalized,lead_1,lead_2");
    assert!(lines[4].starts_with("pair,ensemble,a;b,"));
    assert_eq!(lines.len(), 6);

    let bad = [EnsembleSpec { name: "x".into(), members: vec![2] }];
    assert!(matches!(evaluate(&[("a", &a)], &bad, &w, 7), Err(Error::Config(_))));
}

#[test]
fn model_rows_are_normalized_by_persistence() {
    let ds = synth(1.0, 7);
    let spec = WindowSpec::new(2, 2, vec![0]);
    let w = Windows::all(&ds, spec.clone()).unwrap();
    let mut ms = ModelSpec::new(Variant::SmaatUnet, spec.in_channels(4, 3), spec.out_channels()).with_base_width(8);
    ms.depth = 2;
    ms.cbam_reduction = 4;
    let model = Model::<f32>::build(&ms, 0).unwrap();
    let r = evaluate(&[("smaat", &model)], &[], &w, 4).unwrap();
    let row = r.row("smaat").unwrap();
    assert!(row.raw_mse.is_finite());
    assert_eq!(row.normalized, Some(row.raw_mse / r.persistence().raw_mse));
}

#[test]
fn persistence_uses_only_the_last_frame() {
    let ds = synth(1.0, 8);
    for layout in [StaticLayout::Once, StaticLayout::PerFrame] {
        let mut spec = WindowSpec::new(3, 2, vec![1, 3]);
        spec.static_layout = layout;
        let s = Windows::all(&ds, spec.clone()).unwrap().sample(2).unwrap();
        let base = persistence_predict(&s.input, &spec, 4, 3).unwrap();
        assert_eq!(base.shape(), &[4, 16, 16]);
        let hw = 256;
        let mut noisy = s.input.clone();
        let keep: Vec<usize> = [1, 3].iter().map(|&c| spec.dynamic_plane(2, c, 4, 3)).collect();
        let mut rng = Seeded::new(1);
        for (p, plane) in noisy.data_mut().chunks_mut(hw).enumerate() {
            if !keep.contains(&p) {
                plane.iter_mut().for_each(|x| *x = rng.uniform(-5.0, 5.0) as f32);
            }
        }
        assert_eq!(persistence_predict(&noisy, &spec, 4, 3).unwrap(), base);
        for lead in 0..2 {
            for (k, &p) in keep.iter().enumerate() {
                let out = &base.data()[(lead * 2 + k) * hw..][..hw];
                assert_eq!(out, &s.input.data()[p * hw..][..hw]);
            }
        }
    }
}

#[test]
fn persistence_rejects_wrong_layout() {
    let spec = WindowSpec::new(3, 2, vec![0]);
    let x = Tensor::<f32>::zeros(&[10, 4, 4]);
    assert!(matches!(persistence_predict(&x, &spec, 4, 3), Err(Error::Dimension { .. })));
    let y = Tensor::<f32>::zeros(&[2, 15, 4, 4]);
    assert_eq!(persistence_predict(&y, &spec, 4, 3).unwrap().shape(), &[2, 2, 4, 4]);
}

#[test]
fn spearman_of_monotone_maps() {
    let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| v.powi(3) - 4.0).collect();
    assert_eq!(spearman(&x, &y), Some(1.0));
    assert_eq!(spearman(&x, &[1.0; 3]), None);
}

fn tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, Seeded::new(seed).vec(n, lo, hi).into_iter().map(|v| v as f32).collect()).unwrap()
}

proptest! {
    #[test]
    fn ensemble_never_worse_than_mean_member(seed in 0u64..10_000, members in 2usize..6) {
        let target = tensor(&[2, 3, 4, 4], seed, -2.0, 2.0);
        let preds: Vec<_> = (0..members).map(|k| tensor(&[2, 3, 4, 4], seed * 31 + k as u64 + 1, -3.0, 3.0)).collect();
        let ens = score(&ensemble_predict(&preds).unwrap(), &target).unwrap();
        let mean = preds.iter().map(|p| score(p, &target).unwrap()).sum::<f64>() / members as f64;
        prop_assert!(ens <= mean + 1e-6);
    }

    #[test]
    fn mirrored_pair_recovers_target(seed in 0u64..10_000) {
        let t = tensor(&[3, 5], seed, -1.0, 1.0);
        let p = tensor(&[3, 5], seed + 1, -1.0, 1.0);
        let q = Tensor::from_fn(&[3, 5], |i| 2.0 * t.data()[i] - p.data()[i]);
        let e = score(&ensemble_predict(&[p, q]).unwrap(), &t).unwrap();
        prop_assert!(e < 1e-12);
    }

    #[test]
    fn single_member_is_identity(seed in 0u64..10_000) {
        let p = tensor(&[2, 2, 3, 3], seed, -100.0, 100.0);
        prop_assert_eq!(ensemble_predict(std::slice::from_ref(&p)).unwrap(), p);
    }
}
