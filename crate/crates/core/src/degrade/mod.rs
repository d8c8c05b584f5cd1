//! Synthetic data, a parametric blur/downsample/noise degradation at five
//! severity levels, and PSNR.

mod filter;
mod imageio;
mod synth;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use filter::{
    add_gaussian_noise, clamp01, cubic_weight, downsample_bicubic, gaussian_blur,
    gaussian_kernel, resize_bicubic, upsample_bicubic,
};
pub use imageio::{
    decode_png, decode_pnm, encode_png, encode_pnm, from_bytes, from_u8, read_image, to_bytes,
    to_u8, write_image,
};
pub use synth::{checker, make_synthetic_hr, sinusoid, SynthKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Level {
    I,
    II,
    III,
    IV,
    V,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelParams {
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub rounds: usize,
}

impl Level {
    pub const ALL: [Level; 5] = [Level::I, Level::II, Level::III, Level::IV, Level::V];

    pub fn params(self) -> LevelParams {
        let (blur_sigma, noise_sigma, rounds) = match self {
            Level::I => (0.4, 0.005, 1),
            Level::II => (0.8, 0.01, 1),
            Level::III => (1.2, 0.02, 2),
            Level::IV => (1.6, 0.03, 2),
            Level::V => (2.0, 0.04, 2),
        };
        LevelParams {
            blur_sigma,
            noise_sigma,
            rounds,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::I => "I",
            Level::II => "II",
            Level::III => "III",
            Level::IV => "IV",
            Level::V => "V",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches("Level-").trim_start_matches("level-");
        match t {
            "1" => return Ok(Level::I),
            "2" => return Ok(Level::II),
            "3" => return Ok(Level::III),
            "4" => return Ok(Level::IV),
            "5" => return Ok(Level::V),
            _ => {}
        }
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown degradation level {s:?}")))
    }
}

/// Per round: blur, downsample by `s` (first round only), add noise.
/// Values are clamped to `[0, 1]` after every stage.
pub fn degrade<T: Scalar, R: Rng + ?Sized>(
    hr: &Tensor<T>,
    level: Level,
    s: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let p = level.params();
    let mut img = hr.clone();
    for round in 0..p.rounds {
        img = gaussian_blur(&img, p.blur_sigma)?;
        if round == 0 {
            img = clamp01(&downsample_bicubic(&img, s)?);
        }
        img = add_gaussian_noise(&img, p.noise_sigma, rng)?;
    }
    Ok(img)
}

/// `10·log10(peak² / MSE)`; `f64::INFINITY` when the images are equal.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::InvalidArgument("psnr of empty images".into()));
    }
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// A stream seed for item `index`, independent across indices.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub hr: Tensor<T>,
    pub lr: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSet<T> {
    pub pairs: Vec<Pair<T>>,
    pub scale: usize,
    pub seed: u64,
    pub level: Level,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairSpec {
    pub kind: SynthKind,
    pub channels: usize,
    pub hr_size: usize,
    pub count: usize,
    pub level: Level,
    pub scale: usize,
    pub seed: u64,
}

/// Generate `count` pairs; pair `i` depends only on `(seed, i)`.
pub fn make_pairs<T: Scalar>(spec: &PairSpec) -> Result<PairSet<T>> {
    if spec.hr_size % spec.scale != 0 {
        return Err(Error::InvalidArgument(format!(
            "HR size {} is not divisible by scale {}",
            spec.hr_size, spec.scale
        )));
    }
    let pairs = (0..spec.count as u64)
        .map(|i| {
            let s = derive_seed(spec.seed, i);
            let hr = make_synthetic_hr::<T>(spec.kind, spec.channels, spec.hr_size, s)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, u64::MAX));
            let lr = degrade(&hr, spec.level, spec.scale, &mut rng)?;
            Ok(Pair { hr, lr })
        })
        .collect::<Result<_>>()?;
    Ok(PairSet {
        pairs,
        scale: spec.scale,
        seed: spec.seed,
        level: spec.level,
    })
}

/// Mean PSNR of bicubic upscaling over a pair set.
pub fn bicubic_baseline_psnr<T: Scalar>(set: &PairSet<T>) -> Result<f64> {
    let mut total = 0.0;
    for p in &set.pairs {
        let up = clamp01(&upsample_bicubic(&p.lr, set.scale)?);
        total += psnr(&up, &p.hr, 1.0)?;
    }
    Ok(total / set.pairs.len().max(1) as f64)
}
