use nowcast_core::tensor::{Activation, BatchNormMode, BatchNormStats, BinaryOp, Conv2dOptions, Reduce};
use nowcast_core::{Graph, Result, Tensor, Var};
use nowcast_oracle as oracle;
use oracle::Seeded;
use proptest::prelude::*;

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, Seeded::new(seed).vec(n, -1.0, 1.0)).unwrap()
}

/// Shuffled, well separated values: no ties and nothing near zero, so max
/// and relu kinks stay further than the finite-difference step away.
fn separated(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut rng = Seeded::new(seed);
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5 - (n / 2) as f64) * 0.05).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).unwrap()
}

fn dims(t: &Tensor<f64>) -> [usize; 4] {
    t.dims4("test").unwrap()
}

/// Max relative error between backprop and central differences over every
/// input of `build`, with the output reduced by MSE against a seeded target.
fn gradcheck<F>(inputs: &[Tensor<f64>], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let loss_of = |values: &[Tensor<f64>]| -> (Graph<f64>, Vec<Var>, Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        let shape = g.value(out).shape().to_vec();
        let target = g.input(seeded(&shape, seed ^ 0xABCD));
        let loss = g.mse_loss(out, target).unwrap();
        (g, vars, loss)
    };
    let (mut g, vars, loss) = loss_of(inputs);
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let numeric = oracle::numerical_gradient(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i] = Tensor::new(inputs[i].shape(), x.to_vec()).unwrap();
                let (g, _, loss) = loss_of(&probe);
                g.value(loss).data()[0]
            },
            inputs[i].data(),
            1e-5,
        );
        worst = worst.max(oracle::max_relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

const GRAD_TOL: f64 = 1e-4;

#[test]
fn conv_matches_loop_oracle_f64_and_f32() {
    for (seed, groups, stride, pad) in [(1, 2, 1, 1), (2, 1, 1, 1), (3, 1, 2, 1), (4, 2, 1, 0)] {
        let x = seeded(&[1, 2, 4, 4], seed);
        let w = seeded(&[2, 2 / groups, 3, 3], seed + 100);
        let b = seeded(&[2], seed + 200);
        let (reference, rdims) = oracle::conv2d(
            x.data(),
            dims(&x),
            w.data(),
            2,
            3,
            Some(b.data()),
            stride,
            pad,
            groups,
        );
        let opts = Conv2dOptions { stride, padding: pad, groups };
        let mut g = Graph::<f64>::new();
        let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
        let y = g.conv2d(xv, wv, Some(bv), opts).unwrap();
        assert_eq!(g.value(y).dims4("t").unwrap(), rdims);
        assert!(oracle::max_abs_diff(g.value(y).data(), &reference) < 1e-12);

        let mut g = Graph::<f32>::new();
        let (xv, wv, bv) = (g.input(x.cast()), g.input(w.cast()), g.input(b.cast()));
        let y = g.conv2d(xv, wv, Some(bv), opts).unwrap();
        let y64: Vec<f64> = g.value(y).data().iter().map(|&v| v as f64).collect();
        // the oracle sees the f32-rounded inputs
        let (reference, _) = oracle::conv2d(
            x.cast::<f32>().cast::<f64>().data(),
            dims(&x),
            w.cast::<f32>().cast::<f64>().data(),
            2,
            3,
            Some(b.cast::<f32>().cast::<f64>().data()),
            stride,
            pad,
            groups,
        );
        assert!(oracle::max_abs_diff(&y64, &reference) < 1e-6);
    }
}

#[test]
fn pool_upsample_norm_reductions_match_oracles() {
    let x = seeded(&[1, 3, 8, 8], 7);
    let mut g = Graph::<f64>::new();
    let xv = g.input(x.clone());
    let y = g.maxpool2(xv).unwrap();
    assert_eq!(g.value(y).data(), oracle::maxpool2(x.data(), dims(&x)).as_slice());

    let x = seeded(&[1, 2, 3, 3], 8);
    let xv = g.input(x.clone());
    let y = g.upsample_bilinear2(xv).unwrap();
    assert!(oracle::max_abs_diff(g.value(y).data(), &oracle::upsample_bilinear2(x.data(), dims(&x))) < 1e-12);

    let x = seeded(&[2, 3, 4, 4], 9);
    let gamma = seeded(&[3], 10);
    let beta = seeded(&[3], 11);
    let xv = g.input(x.clone());
    let (gv, bv) = (g.input(gamma.clone()), g.input(beta.clone()));
    let mut stats = BatchNormStats::new(3);
    let y = g
        .batch_norm(xv, gv, bv, BatchNormMode::Train { stats: &mut stats, momentum: 0.1 }, 1e-5)
        .unwrap();
    let reference = oracle::batch_norm_train(x.data(), dims(&x), gamma.data(), beta.data(), 1e-5);
    assert!(oracle::max_abs_diff(g.value(y).data(), &reference) < 1e-12);

    let x = seeded(&[2, 5, 7, 7], 12);
    let xv = g.input(x.clone());
    for (kind, max) in [(Reduce::Avg, false), (Reduce::Max, true)] {
        let y = g.reduce_spatial(xv, kind).unwrap();
        let reference = oracle::reduce_spatial(x.data(), dims(&x), max);
        assert!(oracle::max_abs_diff(g.value(y).data(), &reference) < 1e-12);
    }
    let x = seeded(&[1, 6, 4, 4], 13);
    let xv = g.input(x.clone());
    for (kind, max) in [(Reduce::Avg, false), (Reduce::Max, true)] {
        let y = g.reduce_channel(xv, kind).unwrap();
        let reference = oracle::reduce_channel(x.data(), dims(&x), max);
        assert!(oracle::max_abs_diff(g.value(y).data(), &reference) < 1e-12);
    }

    let x = seeded(&[3, 4], 14);
    let w = seeded(&[5, 4], 15);
    let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
    let y = g.linear(xv, wv, None).unwrap();
    let reference = oracle::linear(x.data(), 3, 4, w.data(), 5, None);
    assert!(oracle::max_abs_diff(g.value(y).data(), &reference) < 1e-12);
}

#[test]
fn broadcast_mul_scales_channels() {
    let x = seeded(&[2, 3, 4, 4], 20);
    let s = seeded(&[2, 3, 1, 1], 21);
    let mut g = Graph::<f64>::new();
    let (xv, sv) = (g.input(x.clone()), g.input(s.clone()));
    let y = g.mul(xv, sv).unwrap();
    for (i, &v) in g.value(y).data().iter().enumerate() {
        assert_eq!(v, x.data()[i] * s.data()[i / 16]);
    }
}

#[test]
fn concat_then_narrow_round_trips() {
    let a = seeded(&[2, 2, 3, 3], 30);
    let b = seeded(&[2, 3, 3, 3], 31);
    let mut g = Graph::<f64>::new();
    let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
    let c = g.concat_channels(av, bv).unwrap();
    let a2 = g.narrow_channels(c, 0, 2).unwrap();
    let b2 = g.narrow_channels(c, 2, 3).unwrap();
    assert_eq!(g.value(a2).data(), a.data());
    assert_eq!(g.value(b2).data(), b.data());
}

#[test]
fn gradients_match_finite_differences() {
    let conv = |opts: Conv2dOptions, bias: bool| {
        move |g: &mut Graph<f64>, v: &[Var]| g.conv2d(v[0], v[1], bias.then(|| v[2]), opts)
    };
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)> = vec![
        (
            "conv2d",
            vec![seeded(&[2, 3, 5, 5], 1), seeded(&[4, 3, 3, 3], 2), seeded(&[4], 3)],
            Box::new(conv(Conv2dOptions::same(3), true)),
        ),
        (
            "conv2d depthwise",
            vec![seeded(&[1, 4, 4, 4], 4), seeded(&[8, 1, 3, 3], 5)],
            Box::new(conv(Conv2dOptions::same(3).groups(4), false)),
        ),
        (
            "conv2d stride 2",
            vec![seeded(&[1, 2, 5, 5], 6), seeded(&[2, 2, 3, 3], 7)],
            Box::new(conv(Conv2dOptions { stride: 2, padding: 1, groups: 1 }, false)),
        ),
        ("maxpool2", vec![separated(&[2, 2, 4, 4], 8)], Box::new(|g, v| g.maxpool2(v[0]))),
        ("upsample", vec![seeded(&[1, 2, 3, 2], 9)], Box::new(|g, v| g.upsample_bilinear2(v[0]))),
        (
            "batch_norm train",
            vec![seeded(&[2, 3, 3, 3], 10), seeded(&[3], 11), seeded(&[3], 12)],
            Box::new(|g, v| {
                let mut stats = BatchNormStats::new(3);
                g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { stats: &mut stats, momentum: 0.1 }, 1e-5)
            }),
        ),
        (
            "batch_norm eval",
            vec![seeded(&[2, 3, 3, 3], 13), seeded(&[3], 14), seeded(&[3], 15)],
            Box::new(|g, v| {
                let stats = BatchNormStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
                g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval(&stats), 1e-5)
            }),
        ),
        ("relu", vec![separated(&[2, 3, 2, 2], 16)], Box::new(|g, v| g.activation(v[0], Activation::Relu))),
        ("sigmoid", vec![seeded(&[2, 3, 2, 2], 17)], Box::new(|g, v| g.activation(v[0], Activation::Sigmoid))),
        ("reduce_spatial avg", vec![seeded(&[2, 3, 3, 3], 18)], Box::new(|g, v| g.reduce_spatial(v[0], Reduce::Avg))),
        ("reduce_spatial max", vec![separated(&[2, 3, 3, 3], 19)], Box::new(|g, v| g.reduce_spatial(v[0], Reduce::Max))),
        ("reduce_channel avg", vec![seeded(&[2, 3, 3, 3], 20)], Box::new(|g, v| g.reduce_channel(v[0], Reduce::Avg))),
        ("reduce_channel max", vec![separated(&[2, 3, 3, 3], 21)], Box::new(|g, v| g.reduce_channel(v[0], Reduce::Max))),
        (
            "linear",
            vec![seeded(&[3, 4], 22), seeded(&[5, 4], 23), seeded(&[5], 24)],
            Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        ),
        (
            "concat",
            vec![seeded(&[2, 2, 3, 3], 25), seeded(&[2, 1, 3, 3], 26)],
            Box::new(|g, v| g.concat_channels(v[0], v[1])),
        ),
        ("narrow", vec![seeded(&[2, 4, 3, 3], 27)], Box::new(|g, v| g.narrow_channels(v[0], 1, 2))),
        (
            "mul broadcast channel",
            vec![seeded(&[2, 3, 4, 4], 28), seeded(&[2, 3, 1, 1], 29)],
            Box::new(|g, v| g.elementwise(v[0], v[1], BinaryOp::Mul)),
        ),
        (
            "mul broadcast spatial",
            vec![seeded(&[2, 3, 4, 4], 30), seeded(&[2, 1, 4, 4], 31)],
            Box::new(|g, v| g.elementwise(v[0], v[1], BinaryOp::Mul)),
        ),
        (
            "add broadcast",
            vec![seeded(&[2, 3, 4, 4], 32), seeded(&[1, 3, 1, 4], 33)],
            Box::new(|g, v| g.elementwise(v[0], v[1], BinaryOp::Add)),
        ),
        ("reshape", vec![seeded(&[2, 3, 1, 1], 34)], Box::new(|g, v| g.reshape(v[0], &[2, 3]))),
        (
            "mse both sides",
            vec![seeded(&[2, 5], 35), seeded(&[2, 5], 36)],
            Box::new(|g, v| g.mse_loss(v[0], v[1])),
        ),
    ];
    for (name, inputs, build) in cases {
        let err = gradcheck(&inputs, 99, build);
        assert!(err < GRAD_TOL, "{name}: max relative error {err:e}");
    }
}

#[test]
fn bias_free_conv_is_linear() {
    let x = seeded(&[1, 3, 6, 6], 40);
    let y = seeded(&[1, 3, 6, 6], 41);
    let w = seeded(&[2, 3, 3, 3], 42);
    let (alpha, beta) = (0.7, -1.3);
    let run = |inp: &Tensor<f64>| {
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.input(inp.clone()), g.input(w.clone()));
        let o = g.conv2d(xv, wv, None, Conv2dOptions::same(3)).unwrap();
        g.value(o).clone()
    };
    let mix = Tensor::from_fn(x.shape(), |i| alpha * x.data()[i] + beta * y.data()[i]);
    let lhs = run(&mix);
    let (cx, cy) = (run(&x), run(&y));
    let rhs = Tensor::from_fn(lhs.shape(), |i| alpha * cx.data()[i] + beta * cy.data()[i]);
    assert!(lhs.max_abs_diff(&rhs) < 1e-5);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.input(seeded(&[2, 4, 8, 8], 50).cast());
        let w = g.param(seeded(&[4, 1, 3, 3], 51).cast());
        let y = g.conv2d(x, w, None, Conv2dOptions::same(3).groups(4)).unwrap();
        let p = g.maxpool2(y).unwrap();
        let u = g.upsample_bilinear2(p).unwrap();
        let t = g.input(Tensor::zeros(&[2, 4, 8, 8]));
        let l = g.mse_loss(u, t).unwrap();
        g.backward(l).unwrap();
        (g.value(u).clone(), g.grad(w).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn pool_then_upsample_restores_extent(b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[b, c, 2 * h, 2 * w]));
        let p = g.maxpool2(x).unwrap();
        let u = g.upsample_bilinear2(p).unwrap();
        prop_assert_eq!(g.value(u).shape(), g.value(x).shape());
    }

    #[test]
    fn broadcast_gradient_is_axis_sum(seed in 0u64..1000) {
        // grad of a broadcast addend equals the sum of the upstream gradient
        // over the broadcast axes
        let a = seeded(&[2, 3, 2, 2], seed);
        let b = seeded(&[2, 3, 1, 1], seed + 1);
        let mut g = Graph::<f64>::new();
        let (av, bv) = (g.param(a), g.param(b));
        let s = g.add(av, bv).unwrap();
        let t = g.input(seeded(&[2, 3, 2, 2], seed + 2));
        let l = g.mse_loss(s, t).unwrap();
        g.backward(l).unwrap();
        let ga = g.grad(av).unwrap().to_vec();
        let gb = g.grad(bv).unwrap();
        for ch in 0..6 {
            let sum: f64 = ga[ch * 4..(ch + 1) * 4].iter().sum();
            prop_assert!((sum - gb[ch]).abs() < 1e-12);
        }
    }
}

#[test]
fn wide_kernel_on_tiny_input() {
    // a 7x7 "same" convolution over 1x1 and 2x2 maps, as in spatial
    // attention at the bottleneck of a deep network
    for (h, w) in [(1, 1), (2, 2), (1, 3)] {
        let x = seeded(&[2, 2, h, w], 60);
        let wt = seeded(&[1, 2, 7, 7], 61);
        let (reference, _) = oracle::conv2d(x.data(), dims(&x), wt.data(), 1, 7, None, 1, 3, 1);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.input(x.clone()), g.input(wt.clone()));
        let y = g.conv2d(xv, wv, None, Conv2dOptions::same(7)).unwrap();
        assert!(oracle::max_abs_diff(g.value(y).data(), &reference) < 1e-12);
        let err = gradcheck(&[x, wt], 62, |g, v| g.conv2d(v[0], v[1], None, Conv2dOptions::same(7)));
        assert!(err < GRAD_TOL, "{h}x{w}: {err:e}");
    }
}
