use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::{
    clamp01, degrade, derive_seed, make_pairs, make_synthetic_hr, psnr, upsample_bicubic, Level,
    PairSet, PairSpec, SynthKind,
};
use crate::error::{Error, Result};
use crate::network::{fuse_network, DgpNetConfig, DgpNetParams};
use crate::tensor::{Scalar, Tensor};

use super::{grad, l1_loss, Adam, AdamState, Batch, Checkpoint, LossWeights, StoredNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            _ => Err(Error::InvalidArgument(format!("unknown dtype {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: DgpNetConfig,
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    /// Side of the low-resolution training patch.
    pub patch: usize,
    pub seed: u64,
    pub dtype: DType,
    pub level: Level,
    pub weights: LossWeights,
    /// Validation cadence in iterations (0: only at the start and end).
    pub log_every: usize,
    pub val_pairs: usize,
    /// Side of the low-resolution validation images.
    pub val_size: usize,
}

impl TrainConfig {
    pub fn micro() -> Self {
        Self {
            net: DgpNetConfig::micro(),
            lr: 1e-4,
            batch: 4,
            iterations: 2000,
            patch: 32,
            seed: 0,
            dtype: DType::F32,
            level: Level::II,
            weights: LossWeights::l1_only(),
            log_every: 100,
            val_pairs: 8,
            val_size: 48,
        }
    }

    pub fn full() -> Self {
        Self {
            net: DgpNetConfig::full(),
            batch: 16,
            iterations: 200_000,
            patch: 64,
            log_every: 1000,
            ..Self::micro()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.lr)));
        }
        if self.batch == 0 || self.patch < 3 || self.val_size < 3 {
            return Err(Error::Config(
                "batch must be positive and patch/val_size at least 3".into(),
            ));
        }
        Ok(())
    }

    fn val_spec(&self) -> PairSpec {
        PairSpec {
            kind: SynthKind::Mixed,
            channels: self.net.in_channels,
            hr_size: self.val_size * self.net.scale,
            count: self.val_pairs,
            level: self.level,
            scale: self.net.scale,
            // Disjoint from the training image seeds.
            seed: derive_seed(self.seed ^ 0x7661_6c69_6461_7465, 0),
        }
    }
}

/// High-resolution training images; patches are cropped and degraded on
/// the fly.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn synthetic(kind: SynthKind, channels: usize, size: usize, count: usize, seed: u64) -> Result<Self> {
        let images = (0..count as u64)
            .map(|i| make_synthetic_hr(kind, channels, size, derive_seed(seed, i)))
            .collect::<Result<_>>()?;
        Ok(Self { images })
    }

    /// The default corpus for a configuration: 32 mixed images, large
    /// enough for two patches side by side.
    pub fn for_config(cfg: &TrainConfig) -> Result<Self> {
        let size = (2 * cfg.patch * cfg.net.scale).max(128);
        Self::synthetic(SynthKind::Mixed, cfg.net.in_channels, size, 32, cfg.seed)
    }

    fn sample<T: Scalar, R: Rng>(&self, cfg: &TrainConfig, rng: &mut R) -> Result<Batch<T>> {
        let s = cfg.net.scale;
        let hp = cfg.patch * s;
        let mut lrs = Vec::with_capacity(cfg.batch);
        let mut hrs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let img = &self.images[rng.random_range(0..self.images.len())];
            let (h, w) = (img.height(), img.width());
            if h < hp || w < hp {
                return Err(Error::Config(format!(
                    "training image {h}x{w} is smaller than the {hp}x{hp} patch"
                )));
            }
            let y0 = rng.random_range(0..=h - hp);
            let x0 = rng.random_range(0..=w - hp);
            let hr = Tensor::<T>::from_fn([1, img.channels(), hp, hp], |[_, c, y, x]| {
                T::from_f64(img.get(0, c, y0 + y, x0 + x) as f64)
            });
            lrs.push(degrade(&hr, cfg.level, s, rng)?);
            hrs.push(hr);
        }
        Ok(Batch {
            lr: Tensor::stack_batch(&lrs)?,
            hr: Tensor::stack_batch(&hrs)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    /// Mean training L1 since the previous record.
    pub l1: f64,
    pub val_psnr: f64,
    pub bicubic_psnr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    /// L1 of the initial and final network on one fixed training batch.
    pub initial_l1: f64,
    pub final_l1: f64,
}

/// Mean PSNR of `forward` (clamped to `[0, 1]`) over a pair set.
pub fn evaluate<T: Scalar>(
    forward: &dyn Fn(&Tensor<T>) -> Result<Tensor<T>>,
    set: &PairSet<T>,
) -> Result<f64> {
    let mut total = 0.0;
    for p in &set.pairs {
        total += psnr(&clamp01(&forward(&p.lr)?), &p.hr, 1.0)?;
    }
    Ok(total / set.pairs.len().max(1) as f64)
}

fn bicubic_psnr<T: Scalar>(set: &PairSet<T>) -> Result<f64> {
    let s = set.scale;
    evaluate(&|lr: &Tensor<T>| upsample_bicubic(lr, s), set)
}

/// Train from a fresh initialization (or from `resume`).
pub fn train(cfg: &TrainConfig, data: &Dataset, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.images.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg, data, resume),
        DType::F64 => train_typed::<f64>(cfg, data, resume),
    }
}

fn train_typed<T: Scalar>(
    cfg: &TrainConfig,
    data: &Dataset,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let (mut net, mut state): (DgpNetParams<T>, AdamState<T>) = match resume {
        Some(c) => {
            let n = c.net.branched()?;
            if n.config != cfg.net {
                return Err(Error::Config("checkpoint network does not match config".into()));
            }
            let n = n.cast::<T>();
            let st = match &c.adam {
                Some(s) => s.cast(),
                None => AdamState::zeros_like(&n),
            };
            (n, st)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
            let n = DgpNetParams::init(cfg.net, &mut rng)?;
            let st = AdamState::zeros_like(&n);
            (n, st)
        }
    };
    let opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let probe: Batch<T> =
        data.sample(cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2)))?;
    let val = make_pairs::<T>(&cfg.val_spec())?;
    let bicubic = bicubic_psnr(&val)?;
    let val_psnr = |net: &DgpNetParams<T>| -> Result<f64> {
        if val.pairs.is_empty() {
            return Ok(f64::NAN);
        }
        let fused = fuse_network(net)?;
        evaluate(&|x: &Tensor<T>| fused.forward(x), &val)
    };
    let probe_l1 = |net: &DgpNetParams<T>| -> Result<f64> {
        l1_loss(&fuse_network(net)?.forward(&probe.lr)?, &probe.hr)
    };

    let initial_l1 = probe_l1(&net)?;
    let mut log = vec![LogRecord {
        iteration: 0,
        l1: initial_l1,
        val_psnr: val_psnr(&net)?,
        bicubic_psnr: bicubic,
    }];
    let (mut acc, mut count) = (0.0, 0usize);
    for it in 1..=cfg.iterations {
        let batch = data.sample::<T, _>(cfg, &mut rng)?;
        let (loss, g) = grad(&net, &batch, &cfg.weights)?;
        opt.step(&mut net, &g, &mut state)?;
        acc += loss;
        count += 1;
        if (cfg.log_every > 0 && it % cfg.log_every == 0) || it == cfg.iterations {
            log.push(LogRecord {
                iteration: it,
                l1: acc / count as f64,
                val_psnr: val_psnr(&net)?,
                bicubic_psnr: bicubic,
            });
            acc = 0.0;
            count = 0;
        }
    }
    let final_l1 = probe_l1(&net)?;
    if !final_l1.is_finite() {
        return Err(Error::NonFinite {
            layer: super::locate_nonfinite(&net, &probe.lr),
        });
    }

    let mut checkpoint = Checkpoint::new(StoredNet::Branched(net.cast::<f32>()));
    checkpoint.adam = Some(state.cast());
    let meta = [
        ("lr", cfg.lr.to_string()),
        ("batch", cfg.batch.to_string()),
        ("iterations", cfg.iterations.to_string()),
        ("patch", cfg.patch.to_string()),
        ("seed", cfg.seed.to_string()),
        ("dtype", cfg.dtype.to_string()),
        ("level", cfg.level.to_string()),
    ];
    for (k, v) in meta {
        checkpoint.meta.insert(k.into(), v);
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        initial_l1,
        final_l1,
    })
}
