//! Procedural high-resolution images standing in for a photo corpus.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SynthKind {
    Checker,
    Sinusoid,
    Ramp,
    RandomTexture,
    Mixed,
}

impl SynthKind {
    pub const ALL: [SynthKind; 5] = [
        SynthKind::Checker,
        SynthKind::Sinusoid,
        SynthKind::Ramp,
        SynthKind::RandomTexture,
        SynthKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Checker => "checker",
            SynthKind::Sinusoid => "sinusoid",
            SynthKind::Ramp => "ramp",
            SynthKind::RandomTexture => "random-texture",
            SynthKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown image kind {s:?}")))
    }
}

/// Square checkerboard with cells of `period` pixels, values 0 and 1.
pub fn checker(y: usize, x: usize, period: usize) -> f64 {
    ((y / period + x / period) % 2) as f64
}

/// `0.5 + 0.5·sin(2π(x·cosθ + y·sinθ)/period + phase)`.
pub fn sinusoid(y: usize, x: usize, period: f64, angle: f64, phase: f64) -> f64 {
    let t = x as f64 * angle.cos() + y as f64 * angle.sin();
    0.5 + 0.5 * (2.0 * PI * t / period + phase).sin()
}

/// Sum of bilinearly interpolated random lattices at several scales,
/// rescaled to `[0, 1]`.
fn value_noise<R: Rng>(size: usize, rng: &mut R) -> Vec<f64> {
    let mut acc = vec![0.0; size * size];
    let mut cell = (size / 4).max(2) as f64;
    let mut amp = 1.0;
    while cell >= 1.0 {
        let g = (size as f64 / cell).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
        for y in 0..size {
            let fy = y as f64 / cell;
            let (iy, ty) = (fy.floor() as usize, fy.fract());
            for x in 0..size {
                let fx = x as f64 / cell;
                let (ix, tx) = (fx.floor() as usize, fx.fract());
                let l = |a: usize, b: usize| lattice[a * g + b];
                let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
                let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
                acc[y * size + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        cell /= 2.0;
        amp *= 0.6;
    }
    let (lo, hi) = acc
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    acc.into_iter().map(|v| (v - lo) / span).collect()
}

fn tinted<R: Rng>(rng: &mut R, channels: usize) -> Vec<(f64, f64)> {
    (0..channels)
        .map(|_| {
            let a = rng.random_range(0.0..0.5);
            let b = rng.random_range(0.5..1.0);
            if rng.random::<bool>() {
                (a, b)
            } else {
                (b, a)
            }
        })
        .collect()
}

/// A `(1, channels, size, size)` image with values in `[0, 1]`.
///
/// `mixed` splits the frame into four rectangles holding a flat patch,
/// regular stripes, a checkerboard and irregular texture, in random
/// positions and colors.
pub fn make_synthetic_hr<T: Scalar>(
    kind: SynthKind,
    channels: usize,
    size: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    if size == 0 || channels == 0 {
        return Err(Error::InvalidArgument("empty synthetic image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, channels, size, size];
    let img: Tensor<f64> = match kind {
        SynthKind::Checker => Tensor::from_fn(shape, |[_, _, y, x]| checker(y, x, 2)),
        SynthKind::Sinusoid => {
            let period = rng.random_range(3.0..12.0);
            let angle = rng.random_range(0.0..PI);
            Tensor::from_fn(shape, |[_, c, y, x]| {
                sinusoid(y, x, period, angle, c as f64 * PI / 3.0)
            })
        }
        SynthKind::Ramp => {
            let d = (2 * size.max(2) - 2) as f64;
            Tensor::from_fn(shape, |[_, c, y, x]| {
                let v = (x + y) as f64 / d;
                if c % 2 == 0 {
                    v
                } else {
                    1.0 - v
                }
            })
        }
        SynthKind::RandomTexture => {
            let planes: Vec<Vec<f64>> = (0..channels).map(|_| value_noise(size, &mut rng)).collect();
            Tensor::from_fn(shape, |[_, c, y, x]| planes[c][y * size + x])
        }
        SynthKind::Mixed => mixed(channels, size, &mut rng),
    };
    Ok(img.cast())
}

fn mixed<R: Rng>(channels: usize, size: usize, rng: &mut R) -> Tensor<f64> {
    let lo = size / 4;
    let hi = (3 * size / 4).max(lo + 1);
    let sy = rng.random_range(lo..hi);
    let sx = rng.random_range(lo..hi);
    let mut regions = [0usize, 1, 2, 3];
    regions.shuffle(rng);

    let flat: Vec<f64> = (0..channels).map(|_| rng.random_range(0.1..0.9)).collect();
    let stripe = (
        rng.random_range(3.0..10.0),
        rng.random_range(0.0..PI),
        tinted(rng, channels),
    );
    let check = (rng.random_range(2..6usize), tinted(rng, channels));
    let noise = value_noise(size, rng);
    let noise_tint = tinted(rng, channels);

    Tensor::from_fn([1, channels, size, size], |[_, c, y, x]| {
        let q = (y >= sy) as usize * 2 + (x >= sx) as usize;
        let mix = |(a, b): (f64, f64), t: f64| a + (b - a) * t;
        match regions[q] {
            0 => flat[c],
            1 => mix(stripe.2[c], sinusoid(y, x, stripe.0, stripe.1, 0.0)),
            2 => mix(check.1[c], checker(y, x, check.0)),
            _ => mix(noise_tint[c], noise[y * size + x]),
        }
    })
}
