use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Avg,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    /// Stride 1 with `k / 2` padding, which preserves spatial size.
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize by batch statistics and fold them into `stats`.
    Train {
        stats: &'a mut BatchNormStats<T>,
        momentum: f64,
    },
    /// Normalize by the running statistics.
    Eval(&'a BatchNormStats<T>),
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    ReduceSpatial {
        input: Var,
        kind: Reduce,
        argmax: Vec<usize>,
    },
    ReduceChannel {
        input: Var,
        kind: Reduce,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Narrow {
        input: Var,
        start: usize,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryOp,
    },
    Reshape {
        input: Var,
    },
    Mse {
        pred: Var,
        target: Var,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Upsample2 { .. } => "upsample_bilinear2",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Activation { .. } => "activation",
            Op::ReduceSpatial { .. } => "reduce_spatial",
            Op::ReduceChannel { .. } => "reduce_channel",
            Op::Linear { .. } => "linear",
            Op::Concat { .. } => "concat_channels",
            Op::Narrow { .. } => "narrow_channels",
            Op::Binary { .. } => "elementwise",
            Op::Reshape { .. } => "reshape",
            Op::Mse { .. } => "mse_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Execution record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order; [`Graph::backward`] walks it once in reverse.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Handles of every recorded node whose operation is `name`, for
    /// inspecting intermediates.
    pub fn find_ops(&self, name: &str) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].op.name() == name)
            .map(Var)
            .collect()
    }

    /// Adds a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a constant leaf.
    pub fn input(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].value.grad.take()
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[1]))
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.value.zero_grad());
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = inputs.iter().any(|&v| self.requires(v));
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, opts: Conv2dOptions) -> Result<Var> {
        let dims = self.value(input).dims4("conv2d")?;
        let geom = ConvGeom::new(dims, self.value(weight).shape(), opts.stride, opts.padding, opts.groups)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geom.out_c] {
                return Err(Error::dim(
                    "conv2d",
                    "bias",
                    format!("expected [{}], got {:?}", geom.out_c, self.value(b).shape()),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            &[geom.batch, geom.out_c, geom.out_h, geom.out_w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &inputs,
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("maxpool2")?;
        if h % 2 != 0 {
            return Err(Error::dim("maxpool2", "height", format!("odd height {h}")));
        }
        if w % 2 != 0 {
            return Err(Error::dim("maxpool2", "width", format!("odd width {w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward([b, c, h, w], self.value(input).data());
        self.push(&[b, c, h / 2, w / 2], out, Op::MaxPool2 { input, argmax }, &[input])
    }

    pub fn upsample_bilinear2(&mut self, input: Var) -> Result<Var> {
        let dims @ [b, c, h, w] = self.value(input).dims4("upsample_bilinear2")?;
        if h == 0 || w == 0 {
            return Err(Error::dim("upsample_bilinear2", "spatial", "empty spatial extent"));
        }
        let out = kernels::upsample2_forward(dims, self.value(input).data());
        self.push(&[b, c, 2 * h, 2 * w], out, Op::Upsample2 { input }, &[input])
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<Var> {
        let dims @ [b, c, h, w] = self.value(input).dims4("batch_norm")?;
        if eps <= 0.0 {
            return Err(Error::Config(format!("batch_norm: eps must be > 0, got {eps}")));
        }
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    what,
                    format!("expected [{c}], got {:?}", self.value(v).shape()),
                ));
            }
        }
        let x = self.value(input).data();
        let (mean, var, batch_stats) = match mode {
            BatchNormMode::Train { stats, momentum } => {
                let n = b * h * w;
                if n < 2 {
                    return Err(Error::Degenerate(format!(
                        "batch_norm: {n} element(s) per channel in training mode"
                    )));
                }
                let (mean, var) = kernels::channel_moments(dims, x);
                let unbias = n as f64 / (n - 1) as f64;
                for ch in 0..c {
                    let rm = stats.mean[ch].as_f64();
                    let rv = stats.var[ch].as_f64();
                    stats.mean[ch] = T::of((1.0 - momentum) * rm + momentum * mean[ch]);
                    stats.var[ch] = T::of((1.0 - momentum) * rv + momentum * var[ch] * unbias);
                }
                (mean, var, true)
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.len() != c {
                    return Err(Error::dim("batch_norm", "running stats", format!("{} != {c}", stats.mean.len())));
                }
                (
                    stats.mean.iter().map(|v| v.as_f64()).collect(),
                    stats.var.iter().map(|v| v.as_f64()).collect(),
                    false,
                )
            }
        };
        let (out, xhat, inv_std) = kernels::batch_norm_apply(
            dims,
            x,
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        self.push(
            &dims,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input, gamma, beta],
        )
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let out = match kind {
            Activation::Relu => x.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Activation::Sigmoid => x.data().iter().map(|&v| stable_sigmoid(v)).collect(),
        };
        self.push(&shape, out, Op::Activation { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Pools each channel over its spatial extent: `[B,C,H,W] -> [B,C,1,1]`.
    pub fn reduce_spatial(&mut self, input: Var, kind: Reduce) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("reduce_spatial")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::dim("reduce_spatial", "spatial", "empty spatial extent"));
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c);
        let mut argmax = Vec::new();
        for p in 0..b * c {
            let s = &x[p * plane..][..plane];
            match kind {
                Reduce::Avg => out.push(s.iter().copied().sum::<T>() / T::of(plane as f64)),
                Reduce::Max => {
                    let (i, v) = first_max(s.iter().copied());
                    out.push(v);
                    argmax.push(p * plane + i);
                }
            }
        }
        self.push(&[b, c, 1, 1], out, Op::ReduceSpatial { input, kind, argmax }, &[input])
    }

    /// Pools across channels at each pixel: `[B,C,H,W] -> [B,1,H,W]`.
    pub fn reduce_channel(&mut self, input: Var, kind: Reduce) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("reduce_channel")?;
        if c == 0 {
            return Err(Error::dim("reduce_channel", "channel", "no channels"));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * plane);
        let mut argmax = Vec::new();
        for bi in 0..b {
            for px in 0..plane {
                let col = (0..c).map(|ch| x[(bi * c + ch) * plane + px]);
                match kind {
                    Reduce::Avg => out.push(col.sum::<T>() / T::of(c as f64)),
                    Reduce::Max => {
                        let (ch, v) = first_max(col);
                        out.push(v);
                        argmax.push((bi * c + ch) * plane + px);
                    }
                }
            }
        }
        self.push(&[b, 1, h, w], out, Op::ReduceChannel { input, kind, argmax }, &[input])
    }

    /// Affine map `[B,N] x [M,N]^T + [M] -> [B,M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, n) = match *self.value(input).shape() {
            [b, n] => (b, n),
            ref s => return Err(Error::dim("linear", "input rank", format!("expected [B,N], got {s:?}"))),
        };
        let (m, wn) = match *self.value(weight).shape() {
            [m, wn] => (m, wn),
            ref s => return Err(Error::dim("linear", "weight rank", format!("expected [M,N], got {s:?}"))),
        };
        if wn != n {
            return Err(Error::dim("linear", "inner", format!("input has {n} features, weight expects {wn}")));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [m] {
                return Err(Error::dim("linear", "bias", format!("expected [{m}], got {:?}", self.value(bv).shape())));
            }
        }
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bias_data = bias.map(|v| self.value(v).data());
        let mut out = Vec::with_capacity(b * m);
        for bi in 0..b {
            let row = &x[bi * n..][..n];
            for mi in 0..m {
                let dot = row.iter().zip(&wt[mi * n..][..n]).fold(T::zero(), |s, (&a, &c)| s + a * c);
                out.push(bias_data.map_or(T::zero(), |bd| bd[mi]) + dot);
            }
        }
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(&[b, m], out, Op::Linear { input, weight, bias }, &inputs)
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.value(a).dims4("concat_channels")?;
        let [bb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if ba != bb {
            return Err(Error::dim("concat_channels", "batch", format!("{ba} vs {bb}")));
        }
        if (ha, wa) != (hb, wb) {
            return Err(Error::dim("concat_channels", "spatial", format!("{ha}x{wa} vs {hb}x{wb}")));
        }
        let plane = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for bi in 0..ba {
            out.extend_from_slice(&xa[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&xb[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        self.push(&[ba, ca + cb, ha, wa], out, Op::Concat { a, b }, &[a, b])
    }

    /// Channels `start..start+len` of a 4-D tensor.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(input).dims4("narrow_channels")?;
        if start + len > c {
            return Err(Error::dim("narrow_channels", "channel", format!("{start}+{len} > {c}")));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            out.extend_from_slice(&x[(bi * c + start) * plane..(bi * c + start + len) * plane]);
        }
        self.push(&[b, len, h, w], out, Op::Narrow { input, start }, &[input])
    }

    /// Elementwise add or multiply. Operands must have equal rank; each axis
    /// must agree or be 1 on one side (singleton broadcasting).
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryOp) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let out_shape = broadcast_shape(&sa, &sb)?;
        let ba = Broadcast::new(&out_shape, &sa);
        let bb = Broadcast::new(&out_shape, &sb);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ba.numel());
        ba.for_each_pair(&bb, |ia, ib| {
            out.push(match kind {
                BinaryOp::Add => xa[ia] + xb[ib],
                BinaryOp::Mul => xa[ia] * xb[ib],
            })
        });
        self.push(&out_shape, out, Op::Binary { a, b, kind }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryOp::Mul)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(input).data().to_vec();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "reshape",
                "numel",
                format!("{:?} -> {shape:?}", self.value(input).shape()),
            ));
        }
        self.push(shape, data, Op::Reshape { input }, &[input])
    }

    /// Mean squared error over all elements, as a one-element tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dim("mse_loss", "shape", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = p.numel().max(1) as f64;
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum();
        self.push(&[1], vec![T::of(sum / n)], Op::Mse { pred, target }, &[pred, target])
    }

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable from
    /// `loss`. Repeated calls add to the existing leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward on non-scalar tensor of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            for (v, contribution) in self.input_grads(i, &g) {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, &c)| *a = *a + c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to those of its inputs that
    /// require gradients.
    fn input_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let req = |v: Var| self.requires(v);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                if req(*input) {
                    out.push((*input, kernels::conv2d_backward_input(geom, g, val(*weight).data())));
                }
                if req(*weight) {
                    out.push((*weight, kernels::conv2d_backward_weight(geom, val(*input).data(), g)));
                }
                if let Some(b) = bias.filter(|&b| req(b)) {
                    out.push((b, kernels::conv2d_backward_bias(geom, g)));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = vec![T::zero(); val(*input).numel()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] = gi[src] + gv;
                }
                out.push((*input, gi));
            }
            Op::Upsample2 { input } => {
                let dims = val(*input).dims4("upsample_bilinear2").expect("validated in forward");
                out.push((*input, kernels::upsample2_backward(dims, g)));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let dims = val(*input).dims4("batch_norm").expect("validated in forward");
                let (dx, dgamma, dbeta) =
                    kernels::batch_norm_backward(dims, g, xhat, inv_std, val(*gamma).data(), *batch_stats);
                if req(*input) {
                    out.push((*input, dx));
                }
                if req(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if req(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Activation { input, kind } => {
                let gi = match kind {
                    Activation::Relu => val(*input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect(),
                };
                out.push((*input, gi));
            }
            Op::ReduceSpatial { input, kind, argmax } => {
                let [_, _, h, w] = val(*input).dims4("reduce_spatial").expect("validated in forward");
                let plane = h * w;
                let mut gi = vec![T::zero(); val(*input).numel()];
                match kind {
                    Reduce::Avg => {
                        let scale = T::of(1.0 / plane as f64);
                        for (p, &gv) in g.iter().enumerate() {
                            gi[p * plane..(p + 1) * plane].fill(gv * scale);
                        }
                    }
                    Reduce::Max => {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            gi[src] = gi[src] + gv;
                        }
                    }
                }
                out.push((*input, gi));
            }
            Op::ReduceChannel { input, kind, argmax } => {
                let [b, c, h, w] = val(*input).dims4("reduce_channel").expect("validated in forward");
                let plane = h * w;
                let mut gi = vec![T::zero(); val(*input).numel()];
                match kind {
                    Reduce::Avg => {
                        let scale = T::of(1.0 / c as f64);
                        for bi in 0..b {
                            for ch in 0..c {
                                let dst = &mut gi[(bi * c + ch) * plane..][..plane];
                                let src = &g[bi * plane..][..plane];
                                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * scale);
                            }
                        }
                    }
                    Reduce::Max => {
                        for (&src, &gv) in argmax.iter().zip(g) {
                            gi[src] = gi[src] + gv;
                        }
                    }
                }
                out.push((*input, gi));
            }
            Op::Linear { input, weight, bias } => {
                let x = val(*input);
                let (b, n) = (x.shape()[0], x.shape()[1]);
                let wt = val(*weight).data();
                let m = val(*weight).shape()[0];
                if req(*input) {
                    let mut gi = vec![T::zero(); b * n];
                    for bi in 0..b {
                        for mi in 0..m {
                            let gv = g[bi * m + mi];
                            gi[bi * n..(bi + 1) * n]
                                .iter_mut()
                                .zip(&wt[mi * n..(mi + 1) * n])
                                .for_each(|(d, &wv)| *d = *d + gv * wv);
                        }
                    }
                    out.push((*input, gi));
                }
                if req(*weight) {
                    let mut gw = vec![T::zero(); m * n];
                    for bi in 0..b {
                        for mi in 0..m {
                            let gv = g[bi * m + mi];
                            gw[mi * n..(mi + 1) * n]
                                .iter_mut()
                                .zip(&x.data()[bi * n..(bi + 1) * n])
                                .for_each(|(d, &xv)| *d = *d + gv * xv);
                        }
                    }
                    out.push((*weight, gw));
                }
                if let Some(bv) = bias.filter(|&bv| req(bv)) {
                    let mut gb = vec![T::zero(); m];
                    for bi in 0..b {
                        gb.iter_mut().zip(&g[bi * m..(bi + 1) * m]).for_each(|(d, &gv)| *d = *d + gv);
                    }
                    out.push((bv, gb));
                }
            }
            Op::Concat { a, b } => {
                let [bn, ca, h, w] = val(*a).dims4("concat_channels").expect("validated in forward");
                let cb = val(*b).shape()[1];
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for bi in 0..bn {
                    let base = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                if req(*a) {
                    out.push((*a, ga));
                }
                if req(*b) {
                    out.push((*b, gb));
                }
            }
            Op::Narrow { input, start } => {
                let [b, c, h, w] = val(*input).dims4("narrow_channels").expect("validated in forward");
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut gi = vec![T::zero(); b * c * plane];
                for bi in 0..b {
                    gi[(bi * c + start) * plane..(bi * c + start + len) * plane]
                        .copy_from_slice(&g[bi * len * plane..(bi + 1) * len * plane]);
                }
                out.push((*input, gi));
            }
            Op::Binary { a, b, kind } => {
                let shape = node.value.shape();
                let (va, vb) = (val(*a), val(*b));
                let ba = Broadcast::new(shape, va.shape());
                let bb = Broadcast::new(shape, vb.shape());
                if req(*a) {
                    let mut ga = vec![T::zero(); va.numel()];
                    let mut k = 0;
                    ba.for_each_pair(&bb, |ia, ib| {
                        let term = match kind {
                            BinaryOp::Add => g[k],
                            BinaryOp::Mul => g[k] * vb.data()[ib],
                        };
                        ga[ia] = ga[ia] + term;
                        k += 1;
                    });
                    out.push((*a, ga));
                }
                if req(*b) {
                    let mut gb = vec![T::zero(); vb.numel()];
                    let mut k = 0;
                    ba.for_each_pair(&bb, |ia, ib| {
                        let term = match kind {
                            BinaryOp::Add => g[k],
                            BinaryOp::Mul => g[k] * va.data()[ia],
                        };
                        gb[ib] = gb[ib] + term;
                        k += 1;
                    });
                    out.push((*b, gb));
                }
            }
            Op::Reshape { input } => out.push((*input, g.to_vec())),
            Op::Mse { pred, target } => {
                let (p, t) = (val(*pred).data(), val(*target).data());
                let scale = g[0] * T::of(2.0 / p.len().max(1) as f64);
                let diff: Vec<T> = p.iter().zip(t).map(|(&a, &b)| scale * (a - b)).collect();
                if req(*target) {
                    out.push((*target, diff.iter().map(|&d| -d).collect()));
                }
                if req(*pred) {
                    out.push((*pred, diff));
                }
            }
        }
        out
    }
}

#[inline]
fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn first_max<T: Scalar>(values: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, v) in values.enumerate() {
        if i == 0 || v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::dim("elementwise", "rank", format!("{a:?} vs {b:?}")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::dim("elementwise", "broadcast", format!("{a:?} vs {b:?}"))),
        })
        .collect()
}

/// Maps indices of a broadcast output (padded to rank 4) onto one operand.
struct Broadcast {
    out: [usize; 4],
    strides: [usize; 4],
}

impl Broadcast {
    fn new(out_shape: &[usize], operand: &[usize]) -> Self {
        let pad = 4 - out_shape.len();
        let mut out = [1; 4];
        let mut dims = [1; 4];
        out[pad..].copy_from_slice(out_shape);
        dims[pad..].copy_from_slice(operand);
        let mut strides = [0; 4];
        let mut s = 1;
        for ax in (0..4).rev() {
            strides[ax] = if dims[ax] == 1 { 0 } else { s };
            s *= dims[ax];
        }
        Self { out, strides }
    }

    fn numel(&self) -> usize {
        self.out.iter().product()
    }

    fn for_each_pair(&self, other: &Broadcast, mut f: impl FnMut(usize, usize)) {
        let [n0, n1, n2, n3] = self.out;
        let (s, o) = (self.strides, other.strides);
        for i0 in 0..n0 {
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    let ba = i0 * s[0] + i1 * s[1] + i2 * s[2];
                    let bb = i0 * o[0] + i1 * o[1] + i2 * o[2];
                    for i3 in 0..n3 {
                        f(ba + i3 * s[3], bb + i3 * o[3]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_and_window_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 2.0));
        let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(g.value(y).data(), &[2.0; 9]);

        let x = g.input(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, Conv2dOptions::default()).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[45.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.input(Tensor::zeros(&[2, 3, 3, 3]));
        let err = g.conv2d(x, w, None, Conv2dOptions::same(3).groups(3)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        let w = g.input(Tensor::zeros(&[2, 2, 3, 3]));
        let err = g.conv2d(x, w, None, Conv2dOptions::same(3)).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "channel", .. }), "{err}");
    }

    #[test]
    fn maxpool_basic_and_odd_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let c = g.input(Tensor::full(&[1, 2, 4, 6], 3.5));
        let y = g.maxpool2(c).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2, 2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 3.5));
        let odd = g.input(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(matches!(g.maxpool2(odd), Err(Error::Dimension { axis: "height", .. })));
    }

    #[test]
    fn maxpool_tie_routes_to_first() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.maxpool2(x).unwrap();
        let target = g.input(Tensor::zeros(&[1, 1, 1, 1]));
        let loss = g.mse_loss(y, target).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 5.0));
        let y = g.upsample_bilinear2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 5.0));
        let x = g.input(t(&[1, 1, 1, 1], &[3.0]));
        let y = g.upsample_bilinear2(x).unwrap();
        assert_eq!(g.value(y).data(), &[3.0; 4]);
    }

    #[test]
    fn batch_norm_degenerate_and_gamma_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let gamma = g.input(t(&[1], &[1.0]));
        let beta = g.input(t(&[1], &[0.0]));
        let mut stats = BatchNormStats::new(1);
        let err = g
            .batch_norm(x, gamma, beta, BatchNormMode::Train { stats: &mut stats, momentum: 0.1 }, 1e-5)
            .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));

        let x = g.input(Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64 * 0.7 - 3.0));
        let gamma = g.input(Tensor::zeros(&[2]));
        let beta = g.input(t(&[2], &[1.5, -2.0]));
        let mut stats = BatchNormStats::new(2);
        let y = g
            .batch_norm(x, gamma, beta, BatchNormMode::Train { stats: &mut stats, momentum: 0.1 }, 1e-5)
            .unwrap();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            let ch = (i / 4) % 2;
            assert_eq!(v, [1.5, -2.0][ch]);
        }
        assert_ne!(stats, BatchNormStats::new(2));
    }

    #[test]
    fn batch_norm_of_normalized_input_is_identity() {
        let mut g = Graph::<f64>::new();
        // per channel: values {-1, 1} -> mean 0, var 1
        let data: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { -1.0 } else { 1.0 }).collect();
        let x = g.input(t(&[2, 2, 2, 2], &data));
        let gamma = g.input(Tensor::full(&[2], 1.0));
        let beta = g.input(Tensor::zeros(&[2]));
        let mut stats = BatchNormStats::new(2);
        let y = g
            .batch_norm(x, gamma, beta, BatchNormMode::Train { stats: &mut stats, momentum: 0.1 }, 1e-5)
            .unwrap();
        assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-3);
    }

    #[test]
    fn activations() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = g.input(t(&[3], &[0.0, 40.0, -40.0]));
        let y = g.sigmoid(x).unwrap();
        let s = g.value(y).data();
        assert_eq!(s[0], 0.5);
        assert!(s.iter().all(|v| v.is_finite() && *v > 0.0 && *v <= 1.0));
        let y32 = {
            let mut g = Graph::<f32>::new();
            let x = g.input(Tensor::new(&[2], vec![40.0f32, -40.0]).unwrap());
            let y = g.sigmoid(x).unwrap();
            g.value(y).data().to_vec()
        };
        assert!(y32.iter().all(|v| v.is_finite() && *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[0.0, 1.0]));
        let y = g.relu(x).unwrap();
        let z = g.input(Tensor::full(&[2], -1.0));
        let loss = g.mse_loss(y, z).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 2.0]);
    }

    #[test]
    fn reductions() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let a = g.reduce_spatial(x, Reduce::Avg).unwrap();
        let m = g.reduce_spatial(x, Reduce::Max).unwrap();
        assert_eq!(g.value(a).data(), &[2.5]);
        assert_eq!(g.value(m).data(), &[4.0]);
        let a = g.reduce_channel(x, Reduce::Avg).unwrap();
        let m = g.reduce_channel(x, Reduce::Max).unwrap();
        assert_eq!(g.value(a).data(), g.value(x).data());
        assert_eq!(g.value(m).data(), g.value(x).data());
        let two = g.input(t(&[1, 2, 1, 2], &[2., 2., 4., 4.]));
        let a = g.reduce_channel(two, Reduce::Avg).unwrap();
        let m = g.reduce_channel(two, Reduce::Max).unwrap();
        assert_eq!(g.value(a).data(), &[3.0, 3.0]);
        assert_eq!(g.value(m).data(), &[4.0, 4.0]);
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 2], &[1.0, 2.0]));
        let w = g.input(t(&[2, 2], &[1., 0., 0., 1.]));
        let y = g.linear(x, w, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        let w = g.input(Tensor::zeros(&[1, 2]));
        let b = g.input(t(&[1], &[7.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let bad = g.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.linear(x, bad, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn concat_shapes_and_empty() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64));
        let b = g.input(Tensor::zeros(&[1, 3, 4, 4]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 5, 4, 4]);
        let e = g.input(Tensor::zeros(&[1, 0, 4, 4]));
        let c = g.concat_channels(a, e).unwrap();
        assert_eq!(g.value(c), g.value(a));
        let wrong = g.input(Tensor::zeros(&[1, 1, 2, 4]));
        assert!(matches!(g.concat_channels(a, wrong), Err(Error::Dimension { axis: "spatial", .. })));
    }

    #[test]
    fn elementwise_identities_and_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0));
        let ones = g.input(Tensor::full(&[2, 3], 1.0));
        let zeros = g.input(Tensor::zeros(&[2, 3]));
        let y = g.mul(x, ones).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let y = g.add(x, zeros).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.input(Tensor::zeros(&[2, 2]));
        assert!(g.add(x, bad).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.input(t(&[2], &[0.0, 0.0]));
        let q = g.input(t(&[2], &[1.0, 3.0]));
        let l = g.mse_loss(p, q).unwrap();
        assert_eq!(g.value(l).data(), &[5.0]);
        let l = g.mse_loss(q, q).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let r = g.input(t(&[2], &[2.0, 4.0]));
        let l = g.mse_loss(r, q).unwrap();
        assert_eq!(g.value(l).data(), &[1.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let zero = g.input(t(&[1], &[0.0]));
        let loss = g.mse_loss(x, zero).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        // second call accumulates
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);

        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[3.0]));
        let zero = g.input(t(&[1], &[0.0]));
        let y = g.add(x, x).unwrap();
        let loss = g.mse_loss(y, zero).unwrap();
        g.backward(loss).unwrap();
        // d/dx (2x)^2 = 8x
        assert_eq!(g.grad(x).unwrap(), &[24.0]);

        let nonscalar = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(nonscalar), Err(Error::Contract(_))));
    }
}
