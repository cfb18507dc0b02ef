//! Stateless block functions that wire graph operations together.
//!
//! Every block takes the graph, its input and a small struct of parameter
//! handles, so the same code serves training, inference and tests that build
//! blocks from hand-picked weights.

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Conv2dOptions, Graph, Reduce, Scalar, Var};

/// One 3x3 convolution stage, either dense or depthwise-separable.
#[derive(Clone, Copy, Debug)]
pub enum ConvParams {
    Regular { weight: Var },
    Separable { depthwise: Var, pointwise: Var },
}

/// Depthwise-separable convolution: a `groups = C_in` k x k convolution
/// (with `weight.shape[0] / C_in` filters per input channel) followed by a
/// 1x1 pointwise convolution. Both stages are bias-free.
pub fn dsc<T: Scalar>(g: &mut Graph<T>, x: Var, depthwise: Var, pointwise: Var) -> Result<Var> {
    let cin = g.value(x).dims4("dsc")?[1];
    let k = g.value(depthwise).dims4("dsc")?[2];
    let d = g.conv2d(x, depthwise, None, Conv2dOptions::same(k).groups(cin))?;
    g.conv2d(d, pointwise, None, Conv2dOptions::default())
}

pub fn conv_stage<T: Scalar>(g: &mut Graph<T>, x: Var, p: ConvParams) -> Result<Var> {
    match p {
        ConvParams::Regular { weight } => {
            let k = g.value(weight).dims4("conv")?[2];
            g.conv2d(x, weight, None, Conv2dOptions::same(k))
        }
        ConvParams::Separable { depthwise, pointwise } => dsc(g, x, depthwise, pointwise),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct DoubleConvParams {
    pub conv: [ConvParams; 2],
    pub norm: [NormParams; 2],
}

/// (conv -> batch norm -> relu) twice.
pub fn double_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &DoubleConvParams,
    modes: [BatchNormMode<'_, T>; 2],
    eps: f64,
) -> Result<Var> {
    let mut h = x;
    for ((conv, norm), mode) in p.conv.iter().zip(&p.norm).zip(modes) {
        h = conv_stage(g, h, *conv)?;
        h = g.batch_norm(h, norm.gamma, norm.beta, mode, eps)?;
        h = g.relu(h)?;
    }
    Ok(h)
}

/// Shared two-layer bottleneck `C -> C/r -> C` of the channel gate.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttentionParams {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Channel gate `sigmoid(mlp(avgpool F) + mlp(maxpool F))`, shape `[B,C,1,1]`.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    f: Var,
    p: &ChannelAttentionParams,
    reduction: usize,
) -> Result<Var> {
    let [b, c, _, _] = g.value(f).dims4("channel_attention")?;
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::Config(format!(
            "channel_attention: reduction {reduction} does not divide {c} channels"
        )));
    }
    let hidden = g.value(p.fc1_weight).shape()[0];
    if hidden != c / reduction {
        return Err(Error::dim(
            "channel_attention",
            "channel",
            format!("bottleneck width {hidden}, expected {c}/{reduction}"),
        ));
    }
    let branch = |g: &mut Graph<T>, kind| -> Result<Var> {
        let pooled = g.reduce_spatial(f, kind)?;
        let flat = g.reshape(pooled, &[b, c])?;
        let h = g.linear(flat, p.fc1_weight, Some(p.fc1_bias))?;
        let h = g.relu(h)?;
        g.linear(h, p.fc2_weight, Some(p.fc2_bias))
    };
    let avg = branch(g, Reduce::Avg)?;
    let max = branch(g, Reduce::Max)?;
    let sum = g.add(avg, max)?;
    let gate = g.sigmoid(sum)?;
    g.reshape(gate, &[b, c, 1, 1])
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialAttentionParams {
    pub weight: Var,
    pub bias: Var,
}

/// Spatial gate `sigmoid(conv([mean_c F, max_c F]))`, shape `[B,1,H,W]`.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<T>, f: Var, p: &SpatialAttentionParams) -> Result<Var> {
    g.value(f).dims4("spatial_attention")?;
    let k = g.value(p.weight).dims4("spatial_attention")?[2];
    if k % 2 == 0 {
        return Err(Error::Config(format!("spatial_attention: kernel {k} must be odd")));
    }
    let avg = g.reduce_channel(f, Reduce::Avg)?;
    let max = g.reduce_channel(f, Reduce::Max)?;
    let pooled = g.concat_channels(avg, max)?;
    let logits = g.conv2d(pooled, p.weight, Some(p.bias), Conv2dOptions::same(k))?;
    g.sigmoid(logits)
}

#[derive(Clone, Copy, Debug)]
pub struct CbamParams {
    pub channel: ChannelAttentionParams,
    pub spatial: SpatialAttentionParams,
}

/// Channel gate then spatial gate, each applied multiplicatively.
pub fn cbam<T: Scalar>(g: &mut Graph<T>, f: Var, p: &CbamParams, reduction: usize) -> Result<Var> {
    let cg = channel_attention(g, f, &p.channel, reduction)?;
    let f1 = g.mul(f, cg)?;
    let sg = spatial_attention(g, f1, &p.spatial)?;
    g.mul(f1, sg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn dsc_centre_tap_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 * 0.5 - 3.0));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let dw = g.input(Tensor::new(&[1, 1, 3, 3], k).unwrap());
        let pw = g.input(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let y = dsc(&mut g, x, dw, pw).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn even_spatial_kernel_is_config_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let weight = g.input(Tensor::zeros(&[1, 2, 4, 4]));
        let bias = g.input(Tensor::zeros(&[1]));
        let r = spatial_attention(&mut g, x, &SpatialAttentionParams { weight, bias });
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
