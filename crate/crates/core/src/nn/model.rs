use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::blocks::{
    self, CbamParams, ChannelAttentionParams, ConvParams, DoubleConvParams, NormParams, SpatialAttentionParams,
};
use super::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchNormStats, Conv2dOptions, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug)]
enum ConvSlot {
    Regular(usize),
    Separable(usize, usize),
}

#[derive(Clone, Copy, Debug)]
struct DoubleSlot {
    conv: [ConvSlot; 2],
    norm: [(usize, usize); 2],
    stats: [usize; 2],
}

#[derive(Clone, Copy, Debug)]
struct CbamSlot {
    fc: [usize; 4],
    spatial: [usize; 2],
}

/// Positions of every parameter in the model's ordered collection.
#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<DoubleSlot>,
    cbam: Vec<CbamSlot>,
    /// Indexed by decoder level; level `i` restores encoder level `i`'s size.
    dec: Vec<DoubleSlot>,
    head: (usize, usize),
}

/// Parameter count of one layer (all tensors sharing a name prefix).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub layer: String,
    pub count: usize,
}

/// Result of [`Model::forward`].
pub struct ModelOutput {
    pub output: Var,
    /// Graph handles of the parameters, in the model's parameter order.
    pub params: Vec<Var>,
}

/// An instantiated network: named parameters plus batch-norm running
/// statistics.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    spec: ModelSpec,
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, BatchNormStats<T>>,
    layout: Layout,
}

struct Builder<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, BatchNormStats<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        let (idx, old) = self.params.insert_full(name, t);
        debug_assert!(old.is_none(), "duplicate parameter name");
        idx
    }

    /// Kaiming-uniform with gain sqrt(2): U(-b, b), b = sqrt(6 / fan_in).
    fn kaiming(&mut self, name: String, shape: &[usize]) -> usize {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)));
        self.push(name, t)
    }

    fn constant(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.push(name, Tensor::full(shape, T::of(v)))
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, spec: &ModelSpec) -> ConvSlot {
        if spec.variant.separable() {
            let m = spec.kernels_per_layer;
            let dw = self.kaiming(format!("{prefix}.depthwise.weight"), &[cin * m, 1, 3, 3]);
            let pw = self.kaiming(format!("{prefix}.pointwise.weight"), &[cout, cin * m, 1, 1]);
            ConvSlot::Separable(dw, pw)
        } else {
            ConvSlot::Regular(self.kaiming(format!("{prefix}.weight"), &[cout, cin, 3, 3]))
        }
    }

    fn double(&mut self, prefix: &str, cin: usize, mid: usize, cout: usize, spec: &ModelSpec) -> DoubleSlot {
        let stage = |b: &mut Self, n: usize, i: usize, o: usize| {
            let conv = b.conv(&format!("{prefix}.conv{n}"), i, o, spec);
            let gamma = b.constant(format!("{prefix}.bn{n}.weight"), &[o], 1.0);
            let beta = b.constant(format!("{prefix}.bn{n}.bias"), &[o], 0.0);
            let (stats, _) = b.buffers.insert_full(format!("{prefix}.bn{n}"), BatchNormStats::new(o));
            (conv, (gamma, beta), stats)
        };
        let (c1, n1, s1) = stage(self, 1, cin, mid);
        let (c2, n2, s2) = stage(self, 2, mid, cout);
        DoubleSlot {
            conv: [c1, c2],
            norm: [n1, n2],
            stats: [s1, s2],
        }
    }

    fn cbam(&mut self, prefix: &str, c: usize, spec: &ModelSpec) -> CbamSlot {
        let hidden = c / spec.cbam_reduction;
        let k = spec.spatial_kernel;
        let fc = [
            self.kaiming(format!("{prefix}.fc1.weight"), &[hidden, c]),
            self.constant(format!("{prefix}.fc1.bias"), &[hidden], 0.0),
            self.kaiming(format!("{prefix}.fc2.weight"), &[c, hidden]),
            self.constant(format!("{prefix}.fc2.bias"), &[c], 0.0),
        ];
        let spatial = [
            self.kaiming(format!("{prefix}.spatial.weight"), &[1, 2, k, k]),
            self.constant(format!("{prefix}.spatial.bias"), &[1], 0.0),
        ];
        CbamSlot { fc, spatial }
    }
}

/// Batch-norm statistics access for one forward pass.
enum Stats<'a, T> {
    Train(&'a mut IndexMap<String, BatchNormStats<T>>, f64),
    Eval(&'a IndexMap<String, BatchNormStats<T>>),
}

impl<T: Scalar> Stats<'_, T> {
    fn modes(&mut self, idx: [usize; 2]) -> [BatchNormMode<'_, T>; 2] {
        match self {
            Stats::Train(map, momentum) => {
                let momentum = *momentum;
                let [(_, a), (_, b)] = map
                    .get_disjoint_indices_mut(idx)
                    .expect("batch-norm slots are distinct");
                [
                    BatchNormMode::Train { stats: a, momentum },
                    BatchNormMode::Train { stats: b, momentum },
                ]
            }
            Stats::Eval(map) => [BatchNormMode::Eval(&map[idx[0]]), BatchNormMode::Eval(&map[idx[1]])],
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model deterministically from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = Builder {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let widths = spec.encoder_widths();
        let mut enc = Vec::new();
        let mut cbam = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &w) in widths.iter().enumerate() {
            enc.push(b.double(&format!("enc{i}"), cin, w, w, spec));
            if spec.variant.attention() {
                cbam.push(b.cbam(&format!("cbam{i}"), w, spec));
            }
            cin = w;
        }
        // Decoder built deepest first so names follow execution order.
        let mut dec = Vec::new();
        for i in (0..spec.depth - 1).rev() {
            let out = if i == 0 { widths[0] } else { widths[i - 1] };
            dec.push(b.double(&format!("dec{i}"), 2 * widths[i], widths[i], out, spec));
        }
        dec.reverse();
        let head_w = b.kaiming("head.weight".into(), &[spec.out_channels, widths[0], 1, 1]);
        let head_b = b.constant("head.bias".into(), &[spec.out_channels], 0.0);
        Ok(Self {
            spec: spec.clone(),
            params: b.params,
            buffers: b.buffers,
            layout: Layout {
                enc,
                cbam,
                dec,
                head: (head_w, head_b),
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    /// Mutable access to parameter values. Shapes must not be changed.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &IndexMap<String, BatchNormStats<T>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> impl Iterator<Item = (&String, &mut BatchNormStats<T>)> {
        self.buffers.iter_mut()
    }

    /// Trainable element count; running statistics are excluded.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Per-layer counts in parameter order. A layer is everything up to the
    /// last dotted component of a name (`enc0.conv1.depthwise.weight` belongs
    /// to `enc0.conv1`).
    pub fn layer_counts(&self) -> Vec<LayerCount> {
        let mut out: Vec<LayerCount> = Vec::new();
        for (name, t) in &self.params {
            let mut layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
            for suffix in [".depthwise", ".pointwise"] {
                layer = layer.strip_suffix(suffix).unwrap_or(layer);
            }
            match out.last_mut() {
                Some(last) if last.layer == layer => last.count += t.numel(),
                _ => out.push(LayerCount {
                    layer: layer.to_string(),
                    count: t.numel(),
                }),
            }
        }
        out
    }

    /// Records a forward pass on `g`. In training mode parameters become
    /// trainable leaves and batch norm updates the running statistics.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, training: bool) -> Result<ModelOutput> {
        let stats = if training {
            Stats::Train(&mut self.buffers, self.spec.bn_momentum)
        } else {
            Stats::Eval(&self.buffers)
        };
        run(&self.spec, &self.layout, &self.params, stats, g, x, training)
    }

    /// Inference on a `[B, C_in, H, W]` batch.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let out = run(
            &self.spec,
            &self.layout,
            &self.params,
            Stats::Eval(&self.buffers),
            &mut g,
            x,
            false,
        )?;
        Ok(g.into_value(out.output))
    }

    /// Converts every parameter and statistic to another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, s)| {
                    let conv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
                    (k.clone(), BatchNormStats { mean: conv(&s.mean), var: conv(&s.var) })
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }
}

fn check_input(spec: &ModelSpec, dims: [usize; 4]) -> Result<()> {
    let [_, c, h, w] = dims;
    if c != spec.in_channels {
        return Err(Error::dim(
            "forward",
            "channel",
            format!("model expects {} input channels, got {c}", spec.in_channels),
        ));
    }
    let m = spec.spatial_multiple();
    for (axis, n) in [("height", h), ("width", w)] {
        if n == 0 || n % m != 0 {
            return Err(Error::dim(
                "forward",
                axis,
                format!("{axis} {n} is not a multiple of {m}; pad the input to a multiple of {m}"),
            ));
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run<T: Scalar>(
    spec: &ModelSpec,
    layout: &Layout,
    params: &IndexMap<String, Tensor<T>>,
    mut stats: Stats<'_, T>,
    g: &mut Graph<T>,
    x: Var,
    training: bool,
) -> Result<ModelOutput> {
    check_input(spec, g.value(x).dims4("forward")?)?;
    let vars: Vec<Var> = params
        .values()
        .map(|t| if training { g.param(t.clone()) } else { g.input(t.clone()) })
        .collect();
    let conv = |s: ConvSlot| match s {
        ConvSlot::Regular(w) => ConvParams::Regular { weight: vars[w] },
        ConvSlot::Separable(d, p) => ConvParams::Separable {
            depthwise: vars[d],
            pointwise: vars[p],
        },
    };
    let double = |s: &DoubleSlot| DoubleConvParams {
        conv: [conv(s.conv[0]), conv(s.conv[1])],
        norm: s.norm.map(|(gamma, beta)| NormParams {
            gamma: vars[gamma],
            beta: vars[beta],
        }),
    };
    let eps = spec.bn_eps;

    let mut skips = Vec::with_capacity(spec.depth);
    let mut h = x;
    for (i, slot) in layout.enc.iter().enumerate() {
        if i > 0 {
            h = g.maxpool2(h)?;
        }
        h = blocks::double_conv(g, h, &double(slot), stats.modes(slot.stats), eps)?;
        if let Some(c) = layout.cbam.get(i) {
            let p = CbamParams {
                channel: ChannelAttentionParams {
                    fc1_weight: vars[c.fc[0]],
                    fc1_bias: vars[c.fc[1]],
                    fc2_weight: vars[c.fc[2]],
                    fc2_bias: vars[c.fc[3]],
                },
                spatial: SpatialAttentionParams {
                    weight: vars[c.spatial[0]],
                    bias: vars[c.spatial[1]],
                },
            };
            h = blocks::cbam(g, h, &p, spec.cbam_reduction)?;
        }
        skips.push(h);
    }
    let mut h = skips.pop().expect("depth >= 2");
    for (i, slot) in layout.dec.iter().enumerate().rev() {
        let up = g.upsample_bilinear2(h)?;
        let cat = g.concat_channels(skips[i], up)?;
        h = blocks::double_conv(g, cat, &double(slot), stats.modes(slot.stats), eps)?;
    }
    let (hw, hb) = layout.head;
    let output = g.conv2d(h, vars[hw], Some(vars[hb]), Conv2dOptions::default())?;
    Ok(ModelOutput { output, params: vars })
}
