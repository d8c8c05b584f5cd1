//! The invariant suite behind `dgpnet verify`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{conv2d, Padding};
use crate::dgconv::{forward_branch_explicit, fuse, BranchId, DgConvParams, IdgCenters};
use crate::error::Result;
use crate::network::{count_params, fuse_network, vconv_param_formula, DgpNetConfig, DgpNetParams, VconvNet};
use crate::params::Parameterized;
use crate::tensor::{Scalar, Tensor};
use crate::train::gradcheck::{check_all_layer_types, check_network, randomize_head, FdOptions};
use crate::train::{Batch, DType};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub worst: f64,
    pub tol: f64,
    pub passed: bool,
}

impl Check {
    fn bound(name: &str, worst: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            worst,
            tol,
            passed: worst <= tol,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "CHECK {} {} {:.3e}", self.name, verdict, self.worst)
    }
}

/// A DGConv layer with random branch kernels, factor head and bias.
pub fn random_dgconv<T: Scalar, R: Rng + ?Sized>(cin: usize, cout: usize, rng: &mut R) -> DgConvParams<T> {
    let mut p = DgConvParams::<f64>::init(cin, cout, rng);
    randomize_head(&mut p, rng);
    p.cast()
}

fn uniform<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

fn fusion_tol<T: Scalar>() -> f64 {
    if T::NAME == "f64" {
        1e-9
    } else {
        1e-4
    }
}

/// Branched vs fused output of random layers with `Cin, Cout ∈ [1, 8]` on
/// `4 × Cin × 16 × 16` inputs.
pub fn fusion_equivalence<T: Scalar>(layers: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..layers {
        let cin = rng.random_range(1..=8);
        let cout = rng.random_range(1..=8);
        let p = random_dgconv::<T, _>(cin, cout, &mut rng);
        let x = uniform::<T, _>([4, cin, 16, 16], &mut rng);
        let branched = p.forward(&x)?;
        let fused = fuse(&p)?.conv().forward(&x)?;
        worst = worst.max(branched.max_abs_diff(&fused)?);
    }
    Ok(Check::bound(
        &format!("fusion_equivalence_{}", T::NAME),
        worst,
        fusion_tol::<T>(),
    ))
}

/// Each gradient/aggregation branch's explicit form against a convolution
/// with its transformed kernel.
pub fn transform_oracles(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for b in [BranchId::Idg, BranchId::Csg, BranchId::Csa, BranchId::Hg, BranchId::Vg] {
        for _ in 0..cases {
            let cin = rng.random_range(1..=4);
            let cout = rng.random_range(1..=4);
            let h = rng.random_range(3..=10);
            let w = rng.random_range(3..=10);
            let k = crate::conv::KernelBank::from_fn(cout, cin, 3, |_| rng.random_range(-1.0..1.0));
            let centers = IdgCenters::random(cin * cout, &mut rng);
            let x = uniform::<f64, _>([2, cin, h, w], &mut rng);
            let explicit = forward_branch_explicit(b, &x, &k, Some(&centers), Padding::Zero(1))?;
            let t = b.transform_bank(&k, Some(&centers))?;
            let via_conv = conv2d(&x, &t, &vec![0.0; cout], Padding::Zero(1))?;
            worst = worst.max(explicit.max_abs_diff(&via_conv)?);
        }
    }
    Ok(Check::bound("transform_oracles", worst, 1e-10))
}

/// `|Σω*| / max|ω|` of transformed gradient kernels, and the response of
/// the gradient branches to constant inputs at interior positions.
pub fn zero_dc(cases: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_sum = 0.0f64;
    let mut worst_const = 0.0f64;
    for _ in 0..cases {
        let w: [f64; 9] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let j = rng.random_range(1..=9u8);
        let maxw = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for b in BranchId::ALL.into_iter().filter(|b| b.is_gradient()) {
            let t = b.transform(&w, j)?;
            worst_sum = worst_sum.max(t.iter().sum::<f64>().abs() / maxw);
        }
        let k = crate::conv::KernelBank::from_fn(2, 2, 3, |_| rng.random_range(-1.0..1.0));
        let centers = IdgCenters::random(4, &mut rng);
        let x = Tensor::<f64>::full([1, 2, 6, 6], rng.random_range(-1.0..1.0));
        for b in BranchId::ALL.into_iter().filter(|b| b.is_gradient()) {
            let y = forward_branch_explicit(b, &x, &k, Some(&centers), Padding::Zero(1))?;
            for c in 0..2 {
                for yy in 1..5 {
                    for xx in 1..5 {
                        worst_const = worst_const.max(y.get(0, c, yy, xx).abs());
                    }
                }
            }
        }
    }
    // Both bounds are 1e-6 relative and 1e-10 absolute; report the larger
    // ratio to its bound.
    let worst = (worst_sum / 1e-6).max(worst_const / 1e-10);
    Ok(Check::bound("zero_dc", worst, 1.0))
}

pub fn gradient_layers(seed: u64) -> Result<Check> {
    let opts = FdOptions::default();
    let r = check_all_layer_types(seed, &opts)?;
    Ok(Check::bound("gradient_layers", r.worst(), opts.tol))
}

/// Sampled central differences over every parameter group of a network,
/// numeric side through the branched forward.
pub fn gradient_network(cfg: DgpNetConfig, seed: u64, per_group: usize) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DgpNetParams::<f64>::init(cfg, &mut rng)?;
    perturb_network(&mut net, &mut rng);
    let batch = Batch {
        lr: Tensor::from_fn([1, cfg.in_channels, 5, 5], |_| rng.random_range(0.0..1.0)),
        hr: Tensor::from_fn([1, cfg.in_channels, 5 * cfg.scale, 5 * cfg.scale], |_| {
            rng.random_range(0.0..1.0)
        }),
    };
    let opts = FdOptions {
        max_per_group: Some(per_group),
        seed,
        ..FdOptions::default()
    };
    let r = check_network(&mut net, &batch, &opts)?;
    Ok(Check::bound("gradient_network", r.worst(), opts.tol))
}

/// Give every factor head and bias a random non-trivial value, so that all
/// gradient paths are active.
pub fn perturb_network<R: Rng + ?Sized>(net: &mut DgpNetParams<f64>, rng: &mut R) {
    for p in net.params_mut() {
        if p.name.ends_with("head.weight") {
            let s = 4.0 / p.data.len() as f64 * 6.0;
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-s..s));
        } else if p.name.ends_with("head.offset") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        } else if p.name.ends_with("bias") {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

/// Fused network vs its vanilla twin vs the closed-form count.
pub fn param_parity(cfg: DgpNetConfig, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DgpNetParams::<f32>::init(cfg, &mut rng)?;
    let fused = count_params(&fuse_network(&net)?);
    let twin = count_params(&VconvNet::<f32>::zeros(cfg)?);
    let formula = vconv_param_formula(&cfg);
    let worst = (fused.abs_diff(twin)).max(twin.abs_diff(formula)) as f64;
    Ok(Check::bound("param_parity", worst, 0.0))
}

/// End-to-end branched vs fused network outputs.
pub fn network_fusion<T: Scalar>(net: &DgpNetParams<T>, inputs: usize, size: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fused = fuse_network(net)?;
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let x = Tensor::from_fn([1, net.config.in_channels, size, size], |_| {
            T::from_f64(rng.random_range(0.0..1.0))
        });
        worst = worst.max(net.forward(&x)?.max_abs_diff(&fused.forward(&x)?)?);
    }
    let tol = if T::NAME == "f64" { 1e-9 } else { 1e-4 };
    Ok(Check::bound(&format!("network_fusion_{}", T::NAME), worst, tol))
}

/// The whole suite on freshly drawn parameters.
pub fn run_suite(seed: u64, dtype: DType) -> Result<Vec<Check>> {
    let micro = DgpNetConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![match dtype {
        DType::F32 => fusion_equivalence::<f32>(20, seed)?,
        DType::F64 => fusion_equivalence::<f64>(20, seed)?,
    }];
    out.push(transform_oracles(10, seed)?);
    out.push(zero_dc(20, seed)?);
    out.push(gradient_layers(seed)?);
    out.push(gradient_network(micro, seed, 2)?);
    out.push(param_parity(micro, seed)?);
    let net = DgpNetParams::<f64>::init(micro, &mut rng)?;
    out.push(match dtype {
        DType::F32 => network_fusion(&net.cast::<f32>(), 2, 12, seed)?,
        DType::F64 => network_fusion(&net, 2, 12, seed)?,
    });
    Ok(out)
}
