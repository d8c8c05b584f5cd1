//! Squeeze-and-excitation channel gating.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{push, push_mut, ParamMut, ParamRef, Parameterized};
use crate::tensor::{cast_slice, sigmoid, Scalar, Tensor};

/// `scale = sigmoid(expand(relu(reduce(avgpool(X)))))`, output `X · scale`.
///
/// `reduce_w` is `hidden × channels`, `expand_w` is `channels × hidden`,
/// both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SeParams<T> {
    channels: usize,
    hidden: usize,
    pub reduce_w: Vec<T>,
    pub reduce_b: Vec<T>,
    pub expand_w: Vec<T>,
    pub expand_b: Vec<T>,
}

impl<T: Scalar> SeParams<T> {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            hidden,
            reduce_w: vec![T::zero(); hidden * channels],
            reduce_b: vec![T::zero(); hidden],
            expand_w: vec![T::zero(); channels * hidden],
            expand_b: vec![T::zero(); channels],
        }
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels, hidden);
        let b = (1.0 / channels as f64).sqrt();
        p.reduce_w
            .iter_mut()
            .for_each(|w| *w = T::from_f64(rng.random_range(-b..b)));
        let b = (1.0 / hidden as f64).sqrt();
        p.expand_w
            .iter_mut()
            .for_each(|w| *w = T::from_f64(rng.random_range(-b..b)));
        p
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn cast<U: Scalar>(&self) -> SeParams<U> {
        SeParams {
            channels: self.channels,
            hidden: self.hidden,
            reduce_w: cast_slice(&self.reduce_w),
            reduce_b: cast_slice(&self.reduce_b),
            expand_w: cast_slice(&self.expand_w),
            expand_b: cast_slice(&self.expand_b),
        }
    }
}

impl<T: Scalar> Parameterized<T> for SeParams<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let (c, h) = (self.channels, self.hidden);
        push(out, prefix, "reduce.weight", &[h, c], &self.reduce_w);
        push(out, prefix, "reduce.bias", &[h], &self.reduce_b);
        push(out, prefix, "expand.weight", &[c, h], &self.expand_w);
        push(out, prefix, "expand.bias", &[c], &self.expand_b);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let (c, h) = (self.channels, self.hidden);
        push_mut(out, prefix, "reduce.weight", &[h, c], &mut self.reduce_w);
        push_mut(out, prefix, "reduce.bias", &[h], &mut self.reduce_b);
        push_mut(out, prefix, "expand.weight", &[c, h], &mut self.expand_w);
        push_mut(out, prefix, "expand.bias", &[c], &mut self.expand_b);
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct SeCache<T> {
    pub input: Tensor<T>,
    pooled: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    scale: Vec<T>,
}

pub fn se_forward<T: Scalar>(x: &Tensor<T>, p: &SeParams<T>) -> Result<Tensor<T>> {
    se_forward_cached(x, p).map(|(y, _)| y)
}

pub fn se_forward_cached<T: Scalar>(
    x: &Tensor<T>,
    p: &SeParams<T>,
) -> Result<(Tensor<T>, SeCache<T>)> {
    let [n, c, _, _] = x.shape();
    if c != p.channels {
        return Err(Error::shape("se_forward", &x.shape(), &[p.channels]));
    }
    let hd = p.hidden;
    let pooled = x.global_avg_pool()?.into_data();
    let mut hidden_pre = vec![T::zero(); n * hd];
    let mut hidden = vec![T::zero(); n * hd];
    let mut scale = vec![T::zero(); n * c];
    for b in 0..n {
        let pb = &pooled[b * c..(b + 1) * c];
        for j in 0..hd {
            let row = &p.reduce_w[j * c..(j + 1) * c];
            let mut acc = p.reduce_b[j];
            for (w, v) in row.iter().zip(pb) {
                acc += *w * *v;
            }
            hidden_pre[b * hd + j] = acc;
            hidden[b * hd + j] = acc.max(T::zero());
        }
        let hb = &hidden[b * hd..(b + 1) * hd];
        for ch in 0..c {
            let row = &p.expand_w[ch * hd..(ch + 1) * hd];
            let mut acc = p.expand_b[ch];
            for (w, v) in row.iter().zip(hb) {
                acc += *w * *v;
            }
            scale[b * c + ch] = sigmoid(acc);
        }
    }
    let mut y = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let s = scale[b * c + ch];
            y.plane_mut(b, ch).iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok((
        y,
        SeCache {
            input: x.clone(),
            pooled,
            hidden_pre,
            hidden,
            scale,
        },
    ))
}

/// Returns the input gradient and the parameter gradient.
pub fn se_backward<T: Scalar>(
    p: &SeParams<T>,
    cache: &SeCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, SeParams<T>)> {
    let x = &cache.input;
    x.expect_same_shape(grad_out, "se_backward")?;
    let [n, c, h, w] = x.shape();
    let hd = p.hidden;
    let inv_hw = T::from_f64(1.0 / (h * w) as f64);
    let mut g = SeParams::zeros(c, hd);
    let mut dx = Tensor::zeros(x.shape());

    for b in 0..n {
        let mut ds_pre = vec![T::zero(); c];
        for ch in 0..c {
            let s = cache.scale[b * c + ch];
            let go = grad_out.plane(b, ch);
            let xi = x.plane(b, ch);
            let mut ds = T::zero();
            for (gv, xv) in go.iter().zip(xi) {
                ds += *gv * *xv;
            }
            ds_pre[ch] = ds * s * (T::one() - s);
            for (d, gv) in dx.plane_mut(b, ch).iter_mut().zip(go) {
                *d = *gv * s;
            }
        }
        let hb = &cache.hidden[b * hd..(b + 1) * hd];
        let mut dh = vec![T::zero(); hd];
        for ch in 0..c {
            let dsp = ds_pre[ch];
            g.expand_b[ch] += dsp;
            for j in 0..hd {
                g.expand_w[ch * hd + j] += dsp * hb[j];
                dh[j] += p.expand_w[ch * hd + j] * dsp;
            }
        }
        let pb = &cache.pooled[b * c..(b + 1) * c];
        let mut dpool = vec![T::zero(); c];
        for j in 0..hd {
            let dhp = if cache.hidden_pre[b * hd + j] > T::zero() {
                dh[j]
            } else {
                T::zero()
            };
            g.reduce_b[j] += dhp;
            for ch in 0..c {
                g.reduce_w[j * c + ch] += dhp * pb[ch];
                dpool[ch] += p.reduce_w[j * c + ch] * dhp;
            }
        }
        for ch in 0..c {
            let add = dpool[ch] * inv_hw;
            dx.plane_mut(b, ch).iter_mut().for_each(|d| *d += add);
        }
    }
    Ok((dx, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn saturated_gate_passes_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, [2, 4, 3, 3]);
        let mut p = SeParams::zeros(4, 2);
        p.expand_b = vec![20.0; 4];
        let y = se_forward(&x, &p).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-6);
    }

    #[test]
    fn zero_expand_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, [1, 4, 3, 3]);
        let p = SeParams::init(4, 2, &mut rng);
        let mut p0 = p.clone();
        p0.expand_w.iter_mut().for_each(|v| *v = 0.0);
        p0.expand_b.iter_mut().for_each(|v| *v = 0.0);
        let y = se_forward(&x, &p0).unwrap();
        assert!(y.max_abs_diff(&x.scale(0.5)).unwrap() == 0.0);
    }

    #[test]
    fn matches_composed_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, hd) = (6, 2);
        let x = rand_tensor(&mut rng, [2, c, 4, 5]);
        let mut p = SeParams::init(c, hd, &mut rng);
        p.reduce_b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        p.expand_b.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        let pooled = x.global_avg_pool().unwrap();
        let mut expected = x.clone();
        for b in 0..2 {
            let hid: Vec<f64> = (0..hd)
                .map(|j| {
                    let z: f64 = (0..c)
                        .map(|ch| p.reduce_w[j * c + ch] * pooled.get(b, ch, 0, 0))
                        .sum::<f64>()
                        + p.reduce_b[j];
                    z.max(0.0)
                })
                .collect();
            for ch in 0..c {
                let z: f64 =
                    (0..hd).map(|j| p.expand_w[ch * hd + j] * hid[j]).sum::<f64>() + p.expand_b[ch];
                let s = 1.0 / (1.0 + (-z).exp());
                for v in expected.plane_mut(b, ch) {
                    *v *= s;
                }
            }
        }
        let y = se_forward(&x, &p).unwrap();
        assert!(y.max_abs_diff(&expected).unwrap() <= 1e-6);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f64>::zeros([1, 3, 2, 2]);
        assert!(se_forward(&x, &SeParams::zeros(4, 2)).is_err());
    }
}
