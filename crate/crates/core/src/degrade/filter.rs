//! Blur, bicubic resampling and additive noise on `[0, 1]` images.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn clamp_idx(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Separable Gaussian blur with replicated edges. `σ < 0.05` is treated as
/// a delta kernel.
pub fn gaussian_blur<T: Scalar>(img: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("blur sigma {sigma}")));
    }
    if sigma < 0.05 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let [n, c, h, w] = img.shape();
    let mut tmp = vec![0.0f64; h * w];
    let mut out = Tensor::zeros(img.shape());
    for b in 0..n {
        for ch in 0..c {
            let src = img.plane(b, ch);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, kv) in k.iter().enumerate() {
                        let xx = clamp_idx(x as i64 + t as i64 - r, w);
                        acc += kv * src[y * w + xx].as_f64();
                    }
                    tmp[y * w + x] = acc;
                }
            }
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (t, kv) in k.iter().enumerate() {
                        let yy = clamp_idx(y as i64 + t as i64 - r, h);
                        acc += kv * tmp[yy * w + x];
                    }
                    dst[y * w + x] = T::from_f64(acc);
                }
            }
        }
    }
    Ok(out)
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source taps and weights for each output coordinate, pixel-center
/// aligned, edges replicated.
fn resample_taps(inp: usize, out: usize) -> Vec<([usize; 4], [f64; 4])> {
    let ratio = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0f64; 4];
            for t in 0..4 {
                idx[t] = clamp_idx(base as i64 - 1 + t as i64, inp);
                wts[t] = cubic_weight(frac - (t as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect()
}

/// Bicubic resampling to `out_h × out_w`, without antialiasing.
pub fn resize_bicubic<T: Scalar>(img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = img.shape();
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let tx = resample_taps(w, out_w);
    let ty = resample_taps(h, out_h);
    let mut tmp = vec![0.0f64; h * out_w];
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            let src = img.plane(b, ch);
            for y in 0..h {
                for (x, (idx, wts)) in tx.iter().enumerate() {
                    tmp[y * out_w + x] = (0..4).map(|t| wts[t] * src[y * w + idx[t]].as_f64()).sum();
                }
            }
            let dst = out.plane_mut(b, ch);
            for (y, (idx, wts)) in ty.iter().enumerate() {
                for x in 0..out_w {
                    let v: f64 = (0..4).map(|t| wts[t] * tmp[idx[t] * out_w + x]).sum();
                    dst[y * out_w + x] = T::from_f64(v);
                }
            }
        }
    }
    Ok(out)
}

/// Shrink by an integer factor `s` that divides both extents.
pub fn downsample_bicubic<T: Scalar>(img: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let (h, w) = (img.height(), img.width());
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} is not divisible by scale {s}"
        )));
    }
    if s == 1 {
        return Ok(img.clone());
    }
    resize_bicubic(img, h / s, w / s)
}

pub fn upsample_bicubic<T: Scalar>(img: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 {
        return Err(Error::InvalidArgument("scale 0".into()));
    }
    if s == 1 {
        return Ok(img.clone());
    }
    resize_bicubic(img, img.height() * s, img.width() * s)
}

pub fn clamp01<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.map(|v| v.max(T::zero()).min(T::one()))
}

/// Adds i.i.d. `N(0, σ²)` noise, then clamps to `[0, 1]`.
pub fn add_gaussian_noise<T: Scalar, R: Rng + ?Sized>(
    img: &Tensor<T>,
    sigma: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise sigma {sigma}: {e}")))?;
    let mut out = img.clone();
    for v in out.data_mut() {
        let n = v.as_f64() + normal.sample(rng);
        *v = T::from_f64(n.clamp(0.0, 1.0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blur_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::from_fn([1, 2, 7, 9], |_| rng.random_range(0.0..1.0));
        assert_eq!(gaussian_blur(&img, 0.04).unwrap(), img);
        let flat = Tensor::full([1, 1, 6, 6], 0.3);
        let b = gaussian_blur(&flat, 1.3).unwrap();
        assert!(b.max_abs_diff(&flat).unwrap() < 1e-12);
    }

    #[test]
    fn blurred_impulse_is_the_kernel() {
        let sigma = 0.9;
        let mut img = Tensor::zeros([1, 1, 11, 11]);
        img.set(0, 0, 5, 5, 1.0);
        let b = gaussian_blur(&img, sigma).unwrap();
        // Independent evaluation of the normalized 2-D Gaussian.
        let r = 3;
        let z: f64 = (-r..=r)
            .flat_map(|i| (-r..=r).map(move |j| (i, j)))
            .map(|(i, j)| (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp())
            .sum();
        for y in 0..11i64 {
            for x in 0..11i64 {
                let (dy, dx) = (y - 5, x - 5);
                let expect = if dy.abs() <= r && dx.abs() <= r {
                    (-((dy * dy + dx * dx) as f64) / (2.0 * sigma * sigma)).exp() / z
                } else {
                    0.0
                };
                assert!((b.get(0, 0, y as usize, x as usize) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for f in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (0..4).map(|t| cubic_weight(f - (t as f64 - 1.0))).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
    }

    #[test]
    fn downsample_constant_and_identity() {
        let flat = Tensor::full([1, 3, 8, 8], 0.6);
        let d = downsample_bicubic(&flat, 2).unwrap();
        assert_eq!(d.shape(), [1, 3, 4, 4]);
        assert!(d.max_abs_diff(&Tensor::full([1, 3, 4, 4], 0.6)).unwrap() < 1e-12);
        assert_eq!(downsample_bicubic(&flat, 1).unwrap(), flat);
        assert!(downsample_bicubic(&flat, 3).is_err());
    }

    #[test]
    fn downsampled_ramp_matches_analytic_values() {
        let f = |y: f64, x: f64| 0.01 * x + 0.02 * y + 0.1;
        let img = Tensor::from_fn([1, 1, 32, 32], |[_, _, y, x]| f(y as f64, x as f64));
        for s in [2, 4] {
            let d = downsample_bicubic(&img, s).unwrap();
            let n = 32 / s;
            // Interior samples: all four taps lie inside the image.
            for oy in 1..n - 1 {
                for ox in 1..n - 1 {
                    let sy = (oy as f64 + 0.5) * s as f64 - 0.5;
                    let sx = (ox as f64 + 0.5) * s as f64 - 0.5;
                    assert!((d.get(0, 0, oy, ox) - f(sy, sx)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn noise_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sigma = 0.02;
        let clean = Tensor::full([1, 1, 1000, 1000], 0.5f64);
        let noisy = add_gaussian_noise(&clean, sigma, &mut rng).unwrap();
        let diff: Vec<f64> = noisy.data().iter().map(|v| v - 0.5).collect();
        let n = diff.len() as f64;
        let mean = diff.iter().sum::<f64>() / n;
        let sd = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 3.0 * sigma / 1000.0);
        assert!((sd - sigma).abs() <= 0.02 * sigma);
        assert_eq!(add_gaussian_noise(&clean, 0.0, &mut rng).unwrap(), clean);
    }

    #[test]
    fn noise_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = Tensor::full([1, 1, 50, 50], 0.99f32);
        let n = add_gaussian_noise(&img, 0.5, &mut rng).unwrap();
        assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
