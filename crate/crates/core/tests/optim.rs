use nowcast_core::data::{gen_synthetic, make_windows, FrameDataset, SynthConfig, WindowSpec, Windows};
use nowcast_core::nn::{Checkpoint, Model, ModelSpec, Variant};
use nowcast_core::optim::{fit, mean_loss, Adam, Cawrs, FitOutputs, ScheduleKind, TrainConfig};
use nowcast_core::{Error, Tensor};
use proptest::prelude::*;

fn scalar_adam(theta0: f64, lr: f64, eps: f64, steps: usize) -> Vec<f64> {
    let mut p = Tensor::new(&[1], vec![theta0]).unwrap();
    let mut adam = Adam::new(0.9, 0.999, eps);
    let mut out = Vec::new();
    for _ in 0..steps {
        let g = 2.0 * p.data()[0];
        p.set_grad(vec![g]).unwrap();
        adam.step([("theta", &mut p)], lr).unwrap();
        p.zero_grad();
        out.push(p.data()[0]);
    }
    out
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let mut p = Tensor::new(&[3], vec![0.5f32, -2.0, 7.0]).unwrap();
    let before = p.clone();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    for _ in 0..5 {
        p.set_grad(vec![0.0; 3]).unwrap();
        adam.step([("p", &mut p)], 0.1).unwrap();
    }
    assert_eq!(p.data(), before.data());
    assert_eq!(adam.steps(), 5);
}

#[test]
fn first_step_moves_each_element_by_lr() {
    let g = [3.0, -1e-3, 250.0, -7.5];
    let mut p = Tensor::new(&[4], vec![0.0f64; 4]).unwrap();
    p.set_grad(g.to_vec()).unwrap();
    Adam::new(0.9, 0.999, 1e-12).step([("p", &mut p)], 0.01).unwrap();
    for (x, gi) in p.data().iter().zip(g) {
        assert!((x + 0.01 * gi.signum()).abs() < 1e-10, "{x}");
    }
    // grads are left for the caller to reset
    assert_eq!(p.grad().unwrap(), &g[..]);
}

#[test]
fn gradient_scale_invariance() {
    let g: Vec<f64> = (0..6).map(|i| (i as f64 - 2.5) * 0.3).collect();
    let run = |c: f64| {
        let mut p = Tensor::new(&[6], vec![1.0f64; 6]).unwrap();
        let mut adam = Adam::new(0.9, 0.999, 1e-12);
        for k in 0..5 {
            let grad = g.iter().map(|x| c * x * (1.0 + k as f64)).collect();
            p.set_grad(grad).unwrap();
            adam.step([("p", &mut p)], 0.05).unwrap();
        }
        p.into_data()
    };
    let base = run(1.0);
    for c in [1e-3, 0.5, 40.0, 1e4] {
        for (a, b) in run(c).iter().zip(&base) {
            assert!((a - b).abs() < 1e-6, "c={c}: {a} vs {b}");
        }
    }
}

#[test]
fn quadratic_matches_scalar_oracle() {
    // Frozen from an independent scalar simulation of the same recurrence.
    let traj = scalar_adam(1.0, 0.1, 1e-8, 100);
    for (step, want) in [(1, 0.9000000005), (10, 0.07624915560691221), (50, -0.004818223222661105), (100, 0.002936675681102549)] {
        assert!((traj[step - 1] - want).abs() < 1e-12, "step {step}: {}", traj[step - 1]);
    }
    assert!(traj[99].abs() < 0.05);
}

#[test]
fn quadratic_loss_is_monotone_without_overshoot() {
    // At lr 0.1 momentum overshoots the minimum and the loss oscillates;
    // at lr 0.01 the iterate approaches 0 from one side for 100 steps.
    let loss: Vec<f64> = scalar_adam(1.0, 0.01, 1e-8, 100).iter().map(|t| t * t).collect();
    assert!(loss[10..].windows(2).all(|w| w[1] <= w[0]));
    assert!(loss[99] < loss[0]);
}

#[test]
fn missing_gradient_names_the_parameter() {
    let mut a = Tensor::new(&[1], vec![1.0f32]).unwrap();
    let mut b = Tensor::new(&[1], vec![1.0f32]).unwrap();
    a.set_grad(vec![1.0]).unwrap();
    let err = Adam::new(0.9, 0.999, 1e-8)
        .step([("a", &mut a), ("enc0.conv1.weight", &mut b)], 0.1)
        .unwrap_err();
    assert!(matches!(&err, Error::Contract(m) if m.contains("enc0.conv1.weight")), "{err}");
}

#[test]
fn schedule_unit_values() {
    let (hi, lo) = (1e-3, 1e-5);
    let mut s = Cawrs::new(hi, lo, 4, 2);
    assert_eq!(s.lr(), hi);
    s.step();
    s.step();
    assert!((s.lr() - (hi + lo) / 2.0).abs() < 1e-18);

    let mut s = Cawrs::new(hi, lo, 4, 2);
    let mut restarts = Vec::new();
    let mut lengths = vec![s.cycle_len()];
    for step in 1..=28 {
        if s.step() {
            restarts.push(step);
            lengths.push(s.cycle_len());
            assert_eq!(s.lr(), hi);
        }
    }
    assert_eq!(restarts, vec![4, 12, 28]);
    assert_eq!(lengths, vec![4, 8, 16, 32]);
}

proptest! {
    #[test]
    fn schedule_stays_in_bounds(t0 in 1usize..20, t_mult in 1usize..4, lo in 0.0f64..1e-3, span in 1e-6f64..1e-2, n in 1usize..200) {
        let hi = lo + span;
        let mut s = Cawrs::new(hi, lo, t0, t_mult);
        for _ in 0..n {
            let lr = s.lr();
            prop_assert!(lo <= lr && lr <= hi);
            prop_assert!(s.t_cur() < s.cycle_len());
            if s.step() {
                prop_assert_eq!(s.lr(), hi);
            }
        }
    }
}

fn tiny_data(frames: usize) -> FrameDataset {
    gen_synthetic(&SynthConfig {
        seed: 3,
        frames,
        height: 16,
        width: 16,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn tiny_model(spec: &WindowSpec, ds: &FrameDataset, variant: Variant) -> Model<f32> {
    let mut m = ModelSpec::new(variant, spec.in_channels(ds.dynamic_channels(), ds.static_channels()), spec.out_channels())
        .with_base_width(8);
    m.depth = 2;
    m.cbam_reduction = 4;
    Model::build(&m, 11).unwrap()
}

#[test]
fn one_sample_smoke_training_decreases_loss() {
    let ds = tiny_data(8);
    let spec = WindowSpec::new(2, 2, vec![0]);
    let windows = Windows::new(&ds, spec.clone(), vec![0]).unwrap();
    let mut model = tiny_model(&spec, &ds, Variant::SmaatUnet);
    let cfg = TrainConfig {
        epochs: 20,
        lr_max: 3e-3,
        batch_size: 1,
        schedule: ScheduleKind::Constant,
        ..TrainConfig::default()
    };
    let r = fit(&mut model, &windows, None, &cfg, FitOutputs::default()).unwrap();
    assert_eq!(r.step_losses.len(), 20);
    assert!(r.step_losses.last().unwrap() < &r.step_losses[0], "{:?}", r.step_losses);
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let ds = tiny_data(24);
    let spec = WindowSpec::new(2, 2, vec![0, 1]);
    let starts = make_windows(&ds, 2, 2);
    let train = Windows::new(&ds, spec.clone(), starts[..14].to_vec()).unwrap();
    let valid = Windows::new(&ds, spec.clone(), starts[17..].to_vec()).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 9,
        checkpoint_every: 2,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let run = |out: Option<&std::path::Path>| {
        let mut model = tiny_model(&spec, &ds, Variant::SmaatUnet);
        let mut seen = Vec::new();
        let mut cb = |r: &nowcast_core::optim::EpochRecord| seen.push(r.epoch);
        let outputs = FitOutputs {
            out_dir: out,
            on_epoch: Some(&mut cb),
            ..FitOutputs::default()
        };
        let report = fit(&mut model, &train, Some(&valid), &cfg, outputs).unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
        (model, report)
    };
    let (m1, r1) = run(Some(dir.path()));
    let (m2, r2) = run(None);
    assert_eq!(r1.step_losses, r2.step_losses);
    assert_eq!(r1.history, r2.history);
    assert_eq!(m1.params(), m2.params());
    assert_eq!(r1.step_losses.len(), 3 * 4);
    assert_eq!(r1.step_lrs[0], cfg.lr_max);
    assert_eq!(r1.step_lrs[4], cfg.lr_max, "restart after one epoch of steps");

    let names: Vec<_> = r1.checkpoints.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, vec!["epoch_002.smck", "epoch_003.smck"]);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(manifest, r1.manifest());
    assert_eq!(manifest.lines().count(), 4);

    let ck = Checkpoint::read(&r1.checkpoints[1]).unwrap();
    assert_eq!(ck.meta["epoch"], "3");
    assert_eq!(ck.meta["train.seed"], "9");
    let loaded = Model::<f32>::from_checkpoint(&ck).unwrap();
    let (x, _) = valid.batch::<f32>(&[0, 1, 2]).unwrap();
    assert_eq!(loaded.predict(&x).unwrap(), m1.predict(&x).unwrap());
    assert_eq!(mean_loss(&loaded, &valid, 2).unwrap(), r1.history[2].valid_loss.unwrap());
}

#[test]
fn fit_rejects_bad_inputs() {
    let ds = tiny_data(8);
    let spec = WindowSpec::new(2, 2, vec![0]);
    let empty = Windows::new(&ds, spec.clone(), vec![]).unwrap();
    let mut model = tiny_model(&spec, &ds, Variant::Unet);
    let cfg = TrainConfig::default();
    let err = fit(&mut model, &empty, None, &cfg, FitOutputs::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));

    let other = Windows::new(&ds, WindowSpec::new(3, 2, vec![0]), vec![0]).unwrap();
    assert!(matches!(fit(&mut model, &other, None, &cfg, FitOutputs::default()), Err(Error::Config(_))));

    let one = Windows::new(&ds, spec, vec![0]).unwrap();
    let bad = TrainConfig { lr_max: f64::NAN, ..cfg };
    assert!(matches!(fit(&mut model, &one, None, &bad, FitOutputs::default()), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_with_diagnostics() {
    let ds = tiny_data(8);
    let spec = WindowSpec::new(2, 2, vec![0]);
    let one = Windows::new(&ds, spec.clone(), vec![0]).unwrap();
    let mut model = tiny_model(&spec, &ds, Variant::Unet);
    model.params_mut().for_each(|(_, p)| p.data_mut().iter_mut().for_each(|x| *x = f32::MAX));
    let cfg = TrainConfig { epochs: 1, batch_size: 1, ..TrainConfig::default() };
    match fit(&mut model, &one, None, &cfg, FitOutputs::default()) {
        Err(Error::NonFinite { step, lr, .. }) => {
            assert_eq!(step, 0);
            assert_eq!(lr, cfg.lr_max);
        }
        other => panic!("expected a numeric error, got {other:?}"),
    }
}
