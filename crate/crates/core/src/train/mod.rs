//! Loss, gradients, optimizer, training loop and checkpoints.
//!
//! Gradients of the multi-branch network are computed on its fused form
//! (one convolution per layer) and then pulled back onto the branch
//! kernels, factor heads and biases. The pullback is exact, so the result
//! is the gradient of the branched network itself; [`gradcheck`] verifies
//! this against central differences of the explicit branched forward.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod trainer;

use crate::error::{Error, Result};
use crate::network::{aiiblock_forward, fuse_network, DgpNetParams, LEAKY_SLOPE};
use crate::tensor::{Scalar, Tensor};

pub use adam::{Adam, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    StoredNet, CHECKPOINT_VERSION,
};
pub use trainer::{evaluate, train, Dataset, DType, LogRecord, TrainConfig, TrainOutcome};

/// Weights of the L1, perceptual and adversarial terms.
///
/// Only the L1 term is implemented; the other two must be zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perceptual: 1.0,
            adversarial: 0.1,
        }
    }
}

impl LossWeights {
    pub fn l1_only() -> Self {
        Self {
            l1: 1.0,
            perceptual: 0.0,
            adversarial: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l1", self.l1),
            ("perceptual", self.perceptual),
            ("adversarial", self.adversarial),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v}")));
            }
        }
        if self.perceptual != 0.0 || self.adversarial != 0.0 {
            return Err(Error::Config(
                "perceptual and adversarial loss terms are not available; set their weights to 0"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    pred.expect_same_shape(target, "l1_loss")?;
    if pred.is_empty() {
        return Err(Error::InvalidArgument("l1_loss of empty tensors".into()));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).abs())
        .sum();
    Ok(s / pred.len() as f64)
}

/// `sign(pred − target) / N`, with `sign(0) = 0`.
pub fn l1_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    let inv = T::from_f64(1.0 / pred.len().max(1) as f64);
    pred.zip_map(target, "l1_loss_grad", |p, t| {
        if p > t {
            inv
        } else if p < t {
            -inv
        } else {
            T::zero()
        }
    })
}

/// A batch of low-resolution inputs and high-resolution targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
}

/// Loss and its gradient with respect to every learnable scalar.
pub fn grad<T: Scalar>(
    params: &DgpNetParams<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
) -> Result<(f64, DgpNetParams<T>)> {
    weights.validate()?;
    let fused = fuse_network(params)?;
    let (pred, cache) = fused.forward_cached(&batch.lr)?;
    let loss = weights.l1 * l1_loss(&pred, &batch.hr)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: locate_nonfinite(params, &batch.lr),
        });
    }
    let g = l1_loss_grad(&pred, &batch.hr)?.scale(T::from_f64(weights.l1));
    let vgrad = fused.backward(&cache, &g)?;
    Ok((loss, params.pullback(&vgrad)?))
}

/// Name of the first layer whose output is not finite (`"loss"` if every
/// layer output is finite).
pub fn locate_nonfinite<T: Scalar>(params: &DgpNetParams<T>, lr: &Tensor<T>) -> String {
    if !lr.is_finite() {
        return "input".into();
    }
    let step = |name: String, y: Result<Tensor<T>>| match y {
        Ok(t) if t.is_finite() => Ok(t),
        _ => Err(name),
    };
    let run = || -> std::result::Result<(), String> {
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut x = step("head".into(), params.head.forward(lr).map(|y| y.leaky_relu(slope)))?;
        for (i, b) in params.blocks.iter().enumerate() {
            x = step(format!("blocks.{i}"), aiiblock_forward(&x, b))?;
        }
        for (i, u) in params.upsampler.iter().enumerate() {
            x = step(
                format!("upsampler.{i}"),
                u.forward(&x).and_then(|y| y.pixel_shuffle(2)),
            )?;
        }
        step("tail".into(), params.tail.forward(&x))?;
        Ok(())
    };
    match run() {
        Ok(()) => "loss".into(),
        Err(name) => name,
    }
}
