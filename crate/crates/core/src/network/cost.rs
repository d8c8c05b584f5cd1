//! Parameter and FLOP accounting.
//!
//! Conventions (one image, FLOPs count a multiply-add as 2):
//!
//! * 3×3 convolution: `2·Cout·Cin·9·H·W`, plus `Cout·H·W` for the bias.
//! * Branched DGConv layer: six such convolution terms, `12·Cout·H·W` for
//!   scaling, summing and biasing the branch outputs, and `12·dim` for the
//!   factor head.
//! * Leaky ReLU: 1 per element.
//! * SE over `C` channels of `H×W`: `C·H·W` for pooling, `4·C·r` for the two
//!   affine maps (`r` the hidden width), `r` for the ReLU, `4·C` for the
//!   sigmoid, `C·H·W` for the channel scaling.
//! * Residual sum in a block: `2·C·H·W`.

use crate::params::Parameterized;
use crate::tensor::Scalar;

use super::{ConvLayer, DgpNetConfig, Dgpnet};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Output extent of the convolution.
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub conv_flops: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub layers: Vec<LayerCost>,
    /// Sum of the convolution terms of every layer.
    pub conv_flops: u64,
    /// Everything, including activations, SE and residual sums.
    pub total_flops: u64,
}

/// Exact number of stored learnable scalars.
pub fn count_params<T: Scalar, N: Parameterized<T>>(net: &N) -> usize {
    net.param_count()
}

fn layer_cost<T: Scalar, L: ConvLayer<T>>(name: String, l: &L, h: usize, w: usize) -> LayerCost {
    LayerCost {
        name,
        in_channels: l.in_channels(),
        out_channels: l.out_channels(),
        height: h,
        width: w,
        params: l.param_count(),
        conv_flops: l.conv_flops(h, w),
        flops: l.flops(h, w),
    }
}

fn se_flops(c: usize, hidden: usize, h: usize, w: usize) -> u64 {
    (2 * c * h * w + 4 * c * hidden + hidden + 4 * c) as u64
}

/// FLOPs of one forward pass on an `h × w` low-resolution image.
pub fn count_flops<S, D, T>(net: &Dgpnet<S, D, T>, h: usize, w: usize) -> FlopReport
where
    S: ConvLayer<T>,
    D: ConvLayer<T>,
    T: Scalar,
{
    let c = net.config.channels;
    let hw = (h * w) as u64;
    let mut layers = vec![layer_cost("head".into(), &net.head, h, w)];
    let mut extra = c as u64 * hw;
    for (i, b) in net.blocks.iter().enumerate() {
        for (br, l) in super::GRADIENT_BRANCHES.iter().zip(&b.gradient) {
            layers.push(layer_cost(format!("blocks.{i}.gradient.{br}"), l, h, w));
        }
        for (br, l) in super::CONTRAST_BRANCHES.iter().zip(&b.contrast) {
            layers.push(layer_cost(format!("blocks.{i}.contrast.{br}"), l, h, w));
        }
        for (n, l) in super::ALIGN_NAMES.iter().zip(&b.align) {
            layers.push(layer_cost(format!("blocks.{i}.align.{n}"), l, h, w));
        }
        extra += 2 * c as u64 * hw;
        extra += b.se.iter().map(|s| se_flops(c, s.hidden(), h, w)).sum::<u64>();
        extra += 2 * c as u64 * hw;
    }
    let (mut uh, mut uw) = (h, w);
    for (i, l) in net.upsampler.iter().enumerate() {
        layers.push(layer_cost(format!("upsampler.{i}"), l, uh, uw));
        uh *= 2;
        uw *= 2;
    }
    layers.push(layer_cost("tail".into(), &net.tail, uh, uw));
    let conv_flops = layers.iter().map(|l| l.conv_flops).sum();
    let total_flops = layers.iter().map(|l| l.flops).sum::<u64>() + extra;
    FlopReport {
        layers,
        conv_flops,
        total_flops,
    }
}

/// Closed-form parameter count of the all-vanilla-convolution network.
pub fn vconv_param_formula(cfg: &DgpNetConfig) -> usize {
    let conv = |ci: usize, co: usize| co * ci * 9 + co;
    let (c, r) = (cfg.channels, cfg.se_hidden());
    let se = 2 * r * c + r + c;
    let block = 4 * conv(c, c / 4) + 2 * conv(c, c / 2) + 4 * conv(c, c / 2) + 2 * se;
    conv(cfg.in_channels, c)
        + cfg.n_block * block
        + cfg.upsample_stages() * conv(c, 4 * c)
        + conv(c, cfg.in_channels)
}
