//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d_backward_kernel, Padding};
use crate::dgconv::{BranchId, DgConvParams, PlainConv, SingleBranchConv};
use crate::error::Result;
use crate::network::{se_backward, se_forward, se_forward_cached, DgpNetParams, SeParams};
use crate::params::Parameterized;
use crate::tensor::Tensor;

use super::{grad, l1_loss, l1_loss_grad, Batch, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many entries per parameter group (all if `None`).
    pub max_per_group: Option<usize>,
    pub seed: u64,
    /// Lower bound on the relative-error denominator. Entries with
    /// `|a| + |n|` below it are judged on absolute error instead: central
    /// differences at 1e-5 carry ~1e-11 of rounding on an O(1) loss, so
    /// gradients near zero cannot be resolved to 1e-4 relative.
    pub floor: f64,
    /// Re-check failing entries at `eps / 10`. A kink of the loss inside
    /// the stencil shrinks with the step; a wrong gradient does not.
    pub retry_smaller: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_per_group: None,
            seed: 0,
            floor: 1e-6,
            retry_smaller: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_index: usize,
    /// Entries that needed the smaller step.
    pub retried: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub groups: Vec<GroupReport>,
    pub tol: f64,
}

impl FdReport {
    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.worst_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tol
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn merge(mut self, prefix: &str, other: FdReport) -> Self {
        self.groups.extend(other.groups.into_iter().map(|mut g| {
            g.name = format!("{prefix}.{}", g.name);
            g
        }));
        self
    }
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-8)
}

pub fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

/// Compare `analytic` against central differences of `loss` around
/// `params`. `params` is perturbed in place and restored.
pub fn finite_diff_check<P: Parameterized<f64>>(
    params: &mut P,
    analytic: &P,
    loss: &mut dyn FnMut(&P) -> Result<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let grads: Vec<(String, Vec<f64>)> = analytic
        .params()
        .into_iter()
        .map(|p| (p.name, p.data.to_vec()))
        .collect();
    let mut groups = Vec::with_capacity(grads.len());
    for (gi, (name, g)) in grads.iter().enumerate() {
        let n = g.len();
        let idx: Vec<usize> = match opts.max_per_group {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut report = GroupReport {
            name: name.clone(),
            checked: idx.len(),
            worst_rel: 0.0,
            worst_index: 0,
            retried: 0,
        };
        for i in idx {
            let mut central = |eps: f64| -> Result<f64> {
                let orig = params.params_mut()[gi].data[i];
                params.params_mut()[gi].data[i] = orig + eps;
                let lp = loss(params);
                params.params_mut()[gi].data[i] = orig - eps;
                let lm = loss(params);
                params.params_mut()[gi].data[i] = orig;
                Ok((lp? - lm?) / (2.0 * eps))
            };
            let mut rel = relative_error_floor(g[i], central(opts.eps)?, opts.floor);
            if opts.retry_smaller && !(rel <= opts.tol) {
                report.retried += 1;
                rel = rel.min(relative_error_floor(g[i], central(opts.eps / 10.0)?, opts.floor));
            }
            if rel > report.worst_rel || rel.is_nan() {
                report.worst_rel = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_index = i;
            }
        }
        groups.push(report);
    }
    Ok(FdReport {
        groups,
        tol: opts.tol,
    })
}

fn kernel_grad(
    x: &Tensor<f64>,
    y: &Tensor<f64>,
    target: &Tensor<f64>,
) -> Result<PlainConv<f64>> {
    let g = l1_loss_grad(y, target)?;
    let (kernel, bias) = conv2d_backward_kernel(&g, x, 3, Padding::Zero(1))?;
    Ok(PlainConv { kernel, bias })
}

/// L1 loss of one DGConv layer. The analytic side goes through the fused
/// kernel and the pullback; the numeric side through the six explicit
/// branch forms.
pub fn check_dgconv_layer(
    params: &mut DgConvParams<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let fused = crate::dgconv::fuse(params)?;
    let y = fused.conv().forward(x)?;
    let analytic = params.pullback(&kernel_grad(x, &y, target)?)?;
    finite_diff_check(
        params,
        &analytic,
        &mut |p| l1_loss(&p.forward(x)?, target),
        opts,
    )
}

pub fn check_single_branch(
    params: &mut SingleBranchConv<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let y = params.fuse()?.conv().forward(x)?;
    let analytic = params.pullback(&kernel_grad(x, &y, target)?)?;
    finite_diff_check(
        params,
        &analytic,
        &mut |p| l1_loss(&p.forward(x)?, target),
        opts,
    )
}

pub fn check_plain_conv(
    params: &mut PlainConv<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let y = params.forward(x)?;
    let analytic = kernel_grad(x, &y, target)?;
    finite_diff_check(
        params,
        &analytic,
        &mut |p| l1_loss(&p.forward(x)?, target),
        opts,
    )
}

pub fn check_se(
    params: &mut SeParams<f64>,
    x: &Tensor<f64>,
    target: &Tensor<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let (y, cache) = se_forward_cached(x, params)?;
    let (_, analytic) = se_backward(params, &cache, &l1_loss_grad(&y, target)?)?;
    finite_diff_check(
        params,
        &analytic,
        &mut |p| l1_loss(&se_forward(x, p)?, target),
        opts,
    )
}

/// Whole-network check: analytic gradients from [`grad`], numeric ones from
/// the branched forward.
pub fn check_network(
    params: &mut DgpNetParams<f64>,
    batch: &Batch<f64>,
    opts: &FdOptions,
) -> Result<FdReport> {
    let weights = LossWeights::l1_only();
    let (_, analytic) = grad(params, batch, &weights)?;
    finite_diff_check(
        params,
        &analytic,
        &mut |p| Ok(weights.l1 * l1_loss(&p.forward(&batch.lr)?, &batch.hr)?),
        opts,
    )
}

/// Random layers of every type, each checked in isolation.
pub fn check_all_layer_types(seed: u64, opts: &FdOptions) -> Result<FdReport> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: [usize; 4], lo: f64, hi: f64| {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    };
    let x = uniform([2, 3, 6, 5], -1.0, 1.0);
    let t4 = uniform([2, 4, 6, 5], -1.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);

    let mut report = FdReport {
        groups: Vec::new(),
        tol: opts.tol,
    };
    let mut dg = DgConvParams::init(3, 4, &mut rng);
    randomize_head(&mut dg, &mut rng);
    report = report.merge("dgconv", check_dgconv_layer(&mut dg, &x, &t4, opts)?);

    for b in BranchId::ALL {
        let mut l = SingleBranchConv::init(b, 3, 4, &mut rng);
        for v in l.bias.iter_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
        report = report.merge(&format!("single.{b}"), check_single_branch(&mut l, &x, &t4, opts)?);
    }

    let mut pc = PlainConv::init(3, 4, &mut rng);
    report = report.merge("plain", check_plain_conv(&mut pc, &x, &t4, opts)?);

    let mut se = SeParams::init(4, 2, &mut rng);
    for v in se.reduce_b.iter_mut().chain(se.expand_b.iter_mut()) {
        *v = rng.random_range(-0.3..0.3);
    }
    let t = t4.map(|v| v * 0.5);
    report = report.merge("se", check_se(&mut se, &t4, &t, opts)?);
    Ok(report)
}

/// Give a freshly initialized layer a non-trivial factor head so the path
/// through the head carries gradient.
pub fn randomize_head<R: rand::Rng + ?Sized>(p: &mut DgConvParams<f64>, rng: &mut R) {
    let scale = 4.0 / p.head().dim() as f64;
    for w in p.head_mut().weight.iter_mut() {
        *w = rng.random_range(-scale..scale);
    }
    for o in p.head_mut().offset.iter_mut() {
        *o = rng.random_range(-0.5..0.5);
    }
    for b in p.bias_mut() {
        *b = rng.random_range(-0.3..0.3);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_formula() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-15);
    }

    #[test]
    fn every_layer_type_passes() {
        let r = check_all_layer_types(3, &FdOptions::default()).unwrap();
        for g in &r.groups {
            assert!(g.worst_rel <= 1e-4, "{}: {}", g.name, g.worst_rel);
        }
        assert!(r.checked() > 500);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pc = PlainConv::<f64>::init(2, 2, &mut rng);
        let x = Tensor::from_fn([1, 2, 4, 4], |[_, c, y, xx]| (c + y * xx) as f64 * 0.1);
        let t = Tensor::zeros([1, 2, 4, 4]);
        let y = pc.forward(&x).unwrap();
        let mut wrong = kernel_grad(&x, &y, &t).unwrap();
        wrong.kernel.data_mut()[5] *= 1.01;
        let r = finite_diff_check(
            &mut pc,
            &wrong,
            &mut |p| l1_loss(&p.forward(&x)?, &t),
            &FdOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }
}
