//! Reverse-mode gradients for networks whose layers are single plain
//! convolutions (the fused network and the vanilla twin).

use crate::conv::{conv2d_backward_input, conv2d_backward_kernel, Padding};
use crate::dgconv::PlainConv;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

use super::se::{se_backward, se_forward_cached, SeCache};
use super::{AiiBlock, Dgpnet, LinearConv, VconvNet, LEAKY_SLOPE};

/// Returns the input gradient and the kernel/bias gradient of one 3×3,
/// padding-1 convolution.
pub fn conv_backward<T: Scalar>(
    conv: &PlainConv<T>,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, PlainConv<T>)> {
    let pad = Padding::Zero(1);
    let dx = conv2d_backward_input(grad_out, &conv.kernel, input.shape(), pad)?;
    let (kernel, bias) = conv2d_backward_kernel(grad_out, input, 3, pad)?;
    Ok((dx, PlainConv { kernel, bias }))
}

fn leaky_grad<T: Scalar>(grad: &Tensor<T>, act: &Tensor<T>) -> Result<Tensor<T>> {
    let slope = T::from_f64(LEAKY_SLOPE);
    grad.zip_map(act, "leaky_relu_backward", |g, a| {
        if a >= T::zero() {
            g
        } else {
            g * slope
        }
    })
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    input: Tensor<T>,
    gradient_act: Vec<Tensor<T>>,
    contrast_act: Vec<Tensor<T>>,
    xg: Tensor<T>,
    xc: Tensor<T>,
    se: Vec<SeCache<T>>,
}

pub fn aiiblock_forward_cached<S, D, T>(
    x: &Tensor<T>,
    block: &AiiBlock<S, D, T>,
) -> Result<(Tensor<T>, BlockCache<T>)>
where
    S: LinearConv<T>,
    D: LinearConv<T>,
    T: Scalar,
{
    let slope = T::from_f64(LEAKY_SLOPE);
    let act = |l: &S| l.forward(x).map(|y| y.leaky_relu(slope));
    let gradient_act = block.gradient.iter().map(act).collect::<Result<Vec<_>>>()?;
    let contrast_act = block.contrast.iter().map(act).collect::<Result<Vec<_>>>()?;
    let xg = Tensor::concat_channels(&gradient_act.iter().collect::<Vec<_>>())?;
    let xc = Tensor::concat_channels(&contrast_act.iter().collect::<Vec<_>>())?;
    let xg1 = block.align[0].forward(&xg)?;
    let xg2 = block.align[1].forward(&xg)?;
    let xc1 = block.align[2].forward(&xc)?;
    let xc2 = block.align[3].forward(&xc)?;
    let (s0, c0) = se_forward_cached(&Tensor::concat_channels(&[&xg1, &xc2])?, &block.se[0])?;
    let (s1, c1) = se_forward_cached(&Tensor::concat_channels(&[&xc1, &xg2])?, &block.se[1])?;
    let mut out = x.clone();
    out.add_assign(&s0)?;
    out.add_assign(&s1)?;
    Ok((
        out,
        BlockCache {
            input: x.clone(),
            gradient_act,
            contrast_act,
            xg,
            xc,
            se: vec![c0, c1],
        },
    ))
}

pub fn aiiblock_backward<S, D, T>(
    block: &AiiBlock<S, D, T>,
    cache: &BlockCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, AiiBlock<PlainConv<T>, PlainConv<T>, T>)>
where
    S: LinearConv<T>,
    D: LinearConv<T>,
    T: Scalar,
{
    let half = grad_out.channels() / 2;
    let quarter = grad_out.channels() / 4;
    let (d0, gse0) = se_backward(&block.se[0], &cache.se[0], grad_out)?;
    let (d1, gse1) = se_backward(&block.se[1], &cache.se[1], grad_out)?;
    let dxg1 = d0.slice_channels(0, half)?;
    let dxc2 = d0.slice_channels(half, half)?;
    let dxc1 = d1.slice_channels(0, half)?;
    let dxg2 = d1.slice_channels(half, half)?;

    let (mut dxg, ga0) = conv_backward(block.align[0].plain(), &cache.xg, &dxg1)?;
    let (t, ga1) = conv_backward(block.align[1].plain(), &cache.xg, &dxg2)?;
    dxg.add_assign(&t)?;
    let (mut dxc, ga2) = conv_backward(block.align[2].plain(), &cache.xc, &dxc1)?;
    let (t, ga3) = conv_backward(block.align[3].plain(), &cache.xc, &dxc2)?;
    dxc.add_assign(&t)?;

    let mut dx = grad_out.clone();
    let mut branch = |layer: &S, act: &Tensor<T>, d: Tensor<T>| -> Result<PlainConv<T>> {
        let d = leaky_grad(&d, act)?;
        let (di, g) = conv_backward(layer.plain(), &cache.input, &d)?;
        dx.add_assign(&di)?;
        Ok(g)
    };
    let mut gg = Vec::with_capacity(4);
    for (i, (l, a)) in block.gradient.iter().zip(&cache.gradient_act).enumerate() {
        gg.push(branch(l, a, dxg.slice_channels(i * quarter, quarter)?)?);
    }
    let mut gc = Vec::with_capacity(2);
    for (i, (l, a)) in block.contrast.iter().zip(&cache.contrast_act).enumerate() {
        gc.push(branch(l, a, dxc.slice_channels(i * half, half)?)?);
    }
    let gradient: [PlainConv<T>; 4] = gg.try_into().expect("four gradient branches");
    let contrast: [PlainConv<T>; 2] = gc.try_into().expect("two contrast branches");
    Ok((
        dx,
        AiiBlock {
            gradient,
            contrast,
            align: [ga0, ga1, ga2, ga3],
            se: [gse0, gse1],
        },
    ))
}

/// Everything [`Dgpnet::backward`] needs from the forward pass.
#[derive(Clone, Debug)]
pub struct NetCache<T> {
    lr: Tensor<T>,
    head_act: Tensor<T>,
    blocks: Vec<BlockCache<T>>,
    upsampler_inputs: Vec<Tensor<T>>,
    tail_input: Tensor<T>,
}

impl<S, D, T> Dgpnet<S, D, T>
where
    S: LinearConv<T>,
    D: LinearConv<T>,
    T: Scalar,
{
    pub fn forward_cached(&self, lr: &Tensor<T>) -> Result<(Tensor<T>, NetCache<T>)> {
        self.check_input(lr)?;
        let slope = T::from_f64(LEAKY_SLOPE);
        let head_act = self.head.forward(lr)?.leaky_relu(slope);
        let mut x = head_act.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = aiiblock_forward_cached(&x, block)?;
            blocks.push(c);
            x = y;
        }
        let mut upsampler_inputs = Vec::with_capacity(self.upsampler.len());
        for stage in &self.upsampler {
            let y = stage.forward(&x)?.pixel_shuffle(2)?;
            upsampler_inputs.push(std::mem::replace(&mut x, y));
        }
        let out = self.tail.forward(&x)?;
        Ok((
            out,
            NetCache {
                lr: lr.clone(),
                head_act,
                blocks,
                upsampler_inputs,
                tail_input: x,
            },
        ))
    }

    /// Gradient of a scalar loss with respect to every layer, given its
    /// gradient with respect to the network output.
    pub fn backward(&self, cache: &NetCache<T>, grad_out: &Tensor<T>) -> Result<VconvNet<T>> {
        let (mut g, tail) = conv_backward(self.tail.plain(), &cache.tail_input, grad_out)?;
        let mut upsampler = Vec::with_capacity(self.upsampler.len());
        for (stage, input) in self.upsampler.iter().zip(&cache.upsampler_inputs).rev() {
            let (dx, gs) = conv_backward(stage.plain(), input, &g.pixel_unshuffle(2)?)?;
            upsampler.push(gs);
            g = dx;
        }
        upsampler.reverse();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dx, gb) = aiiblock_backward(block, c, &g)?;
            blocks.push(gb);
            g = dx;
        }
        blocks.reverse();
        let g = leaky_grad(&g, &cache.head_act)?;
        let (_, head) = conv_backward(self.head.plain(), &cache.lr, &g)?;
        Ok(Dgpnet {
            config: self.config,
            head,
            blocks,
            upsampler,
            tail,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::DgpNetConfig;
    use crate::params::Parameterized;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &VconvNet<f64>, lr: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
        let y = net.forward(lr).unwrap();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_backward_matches_difference_quotient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn([1, 2, 4, 5], |_| rng.random_range(-1.0..1.0));
        let conv = PlainConv::<f64>::init(2, 3, &mut rng);
        let w = Tensor::from_fn([1, 3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let (dx, _) = conv_backward(&conv, &x, &w).unwrap();
        let f = |x: &Tensor<f64>| -> f64 {
            let y = conv.forward(x).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
        };
        for i in [0, 7, 19, 33] {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            let num = (f(&xp) - f(&xm)) / 2e-6;
            assert!((num - dx.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn net_backward_matches_difference_quotient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DgpNetConfig {
            channels: 8,
            n_block: 1,
            scale: 2,
            in_channels: 1,
        };
        let net = VconvNet::<f64>::init(cfg, &mut rng).unwrap();
        let lr = Tensor::from_fn([2, 1, 4, 4], |_| rng.random_range(0.0..1.0));
        let w = Tensor::from_fn([2, 1, 8, 8], |_| rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward_cached(&lr).unwrap();
        let grads = net.backward(&cache, &w).unwrap();
        let gp = grads.params();
        let base = net.clone();
        for (pi, p) in base.params().iter().enumerate() {
            let idx = (pi * 7) % p.data.len();
            let mut plus = net.clone();
            plus.params_mut()[pi].data[idx] += 1e-6;
            let mut minus = net.clone();
            minus.params_mut()[pi].data[idx] -= 1e-6;
            let num = (loss(&plus, &lr, &w) - loss(&minus, &lr, &w)) / 2e-6;
            let ana = gp[pi].data[idx];
            let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);
            assert!(rel < 1e-5, "{}: {num} vs {ana}", p.name);
        }
    }
}
