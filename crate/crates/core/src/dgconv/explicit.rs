//! Branch forwards evaluated literally from their differential definitions,
//! one 3×3 neighborhood at a time. These never go through the rewritten
//! kernels, which makes them the reference the transforms are checked
//! against, and the "branched" inference path.

use rayon::prelude::*;

use super::transform::{center_offset, Slice9, HG_PARTNER, VG_PARTNER};
use super::{BranchId, IdgCenters};
use crate::conv::{conv2d, output_extent, KernelBank, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Zero-pad every plane by `p` on each side.
fn pad_planes<T: Scalar>(x: &Tensor<T>, p: usize) -> (Vec<T>, usize, usize) {
    let [n, c, h, w] = x.shape();
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); n * c * ph * pw];
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let base = (b * c + ch) * ph * pw;
            for y in 0..h {
                let dst = base + (y + p) * pw + p;
                out[dst..dst + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    (out, ph, pw)
}

/// Runs `f(slice_index, weights, patch)` at every output position and
/// sums over input channels.
fn neighborhood_forward<T, F>(
    x: &Tensor<T>,
    kernel: &KernelBank<T>,
    padding: Padding,
    op: &'static str,
    f: F,
) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(usize, &Slice9<T>, &Slice9<T>) -> T + Sync,
{
    if x.channels() != kernel.in_channels() {
        return Err(Error::shape(op, &x.shape(), &kernel.shape()));
    }
    if kernel.size() != 3 {
        return Err(Error::InvalidArgument(format!(
            "{op}: kernel must be 3x3, got {0}x{0}",
            kernel.size()
        )));
    }
    let [n, cin, h, w] = x.shape();
    let p = padding.amount();
    if p > 1 {
        return Err(Error::InvalidArgument(format!("{op}: padding {p} > 1")));
    }
    let (oh, ow) = match (output_extent(h, 3, p), output_extent(w, 3, p)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => return Err(Error::shape(op, &x.shape(), &kernel.shape())),
    };
    let cout = kernel.out_channels();
    let (padded, ph, pw) = pad_planes(x, p);
    let mut out = Tensor::zeros([n, cout, oh, ow]);

    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let (b, oc) = (plane_idx / cout, plane_idx % cout);
            for ic in 0..cin {
                let slice_idx = oc * cin + ic;
                let wts: &Slice9<T> = kernel.slice(oc, ic).try_into().expect("3x3");
                let src = &padded[(b * cin + ic) * ph * pw..(b * cin + ic + 1) * ph * pw];
                for oy in 0..oh {
                    let r0 = &src[oy * pw..];
                    let r1 = &src[(oy + 1) * pw..];
                    let r2 = &src[(oy + 2) * pw..];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let patch = [
                            r0[ox],
                            r0[ox + 1],
                            r0[ox + 2],
                            r1[ox],
                            r1[ox + 1],
                            r1[ox + 2],
                            r2[ox],
                            r2[ox + 1],
                            r2[ox + 2],
                        ];
                        *d += f(slice_idx, wts, &patch);
                    }
                }
            }
        });
    Ok(out)
}

/// Plain 3×3 convolution with zero padding 1.
pub fn forward_vconv<T: Scalar>(
    x: &Tensor<T>,
    kernel: &KernelBank<T>,
    bias: &[T],
) -> Result<Tensor<T>> {
    conv2d(x, kernel, bias, Padding::Zero(1))
}

/// `Σ ω_i · (x_i − x_j)` with `j` taken per slice from `centers`.
pub fn forward_idg_explicit<T: Scalar>(
    x: &Tensor<T>,
    kernel: &KernelBank<T>,
    centers: &IdgCenters,
    padding: Padding,
) -> Result<Tensor<T>> {
    centers.check_len(kernel.slices())?;
    let offsets = centers
        .as_slice()
        .iter()
        .map(|&j| center_offset(j))
        .collect::<Result<Vec<_>>>()?;
    neighborhood_forward(x, kernel, padding, "idg", |s, w, px| {
        let xj = px[offsets[s]];
        let mut acc = T::zero();
        for i in 0..9 {
            acc += w[i] * (px[i] - xj);
        }
        acc
    })
}

#[inline]
fn patch_mean<T: Scalar>(px: &Slice9<T>) -> T {
    let mut s = T::zero();
    for &v in px {
        s += v;
    }
    s / T::from_f64(9.0)
}

/// `Σ ω_i · (x_i − mean(x))`.
pub fn forward_csg_explicit<T: Scalar>(
    x: &Tensor<T>,
    kernel: &KernelBank<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    neighborhood_forward(x, kernel, padding, "csg", |_, w, px| {
        let m = patch_mean(px);
        let mut acc = T::zero();
        for i in 0..9 {
            acc += w[i] * (px[i] - m);
        }
        acc
    })
}

/// `Σ ω_i · (x_i + mean(x))`.
pub fn forward_csa_explicit<T: Scalar>(
    x: &Tensor<T>,
    kernel: &KernelBank<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    neighborhood_forward(x, kernel, padding, "csa", |_, w, px| {
        let m = patch_mean(px);
        let mut acc = T::zero();
        for i in 0..9 {
            acc += w[i] * (px[i] + m);
        }
        acc
    })
}

fn pairwise<T: Scalar>(w: &Slice9<T>, px: &Slice9<T>, partner: &[Option<usize>; 9]) -> T {
    let mut acc = T::zero();
    for i in 0..9 {
        if let Some(p) = partner[i] {
            acc += w[i] * (px[i] - px[p]);
        }
    }
    acc
}

/// Within-row differences: `ω1(x1−x3) + ω3(x3−x1) + …`, middle column 0.
pub fn forward_hg_explicit<T: Scalar>(
    x: &Tensor<T>,
    kernel: &KernelBank<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    neighborhood_forward(x, kernel, padding, "hg", |_, w, px| {
        pairwise(w, px, &HG_PARTNER)
    })
}

/// Within-column differences: `ω1(x1−x7) + ω7(x7−x1) + …`, middle row 0.
pub fn forward_vg_explicit<T: Scalar>(
    x: &Tensor<T>,
    kernel: &KernelBank<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    neighborhood_forward(x, kernel, padding, "vg", |_, w, px| {
        pairwise(w, px, &VG_PARTNER)
    })
}

/// Dispatch on branch. No bias is added.
pub fn forward_branch_explicit<T: Scalar>(
    branch: BranchId,
    x: &Tensor<T>,
    kernel: &KernelBank<T>,
    centers: Option<&IdgCenters>,
    padding: Padding,
) -> Result<Tensor<T>> {
    match branch {
        BranchId::Vconv => {
            let zero = vec![T::zero(); kernel.out_channels()];
            conv2d(x, kernel, &zero, padding)
        }
        BranchId::Idg => {
            let c = centers
                .ok_or_else(|| Error::InvalidArgument("idg branch needs centers".into()))?;
            forward_idg_explicit(x, kernel, c, padding)
        }
        BranchId::Csg => forward_csg_explicit(x, kernel, padding),
        BranchId::Hg => forward_hg_explicit(x, kernel, padding),
        BranchId::Vg => forward_vg_explicit(x, kernel, padding),
        BranchId::Csa => forward_csa_explicit(x, kernel, padding),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rand_bank(rng: &mut ChaCha8Rng, o: usize, i: usize) -> KernelBank<f64> {
        KernelBank::from_fn(o, i, 3, |_| rng.random_range(-1.0..1.0))
    }

    fn interior_max(t: &Tensor<f64>) -> f64 {
        let [n, c, h, w] = t.shape();
        let mut m = 0.0f64;
        for b in 0..n {
            for ch in 0..c {
                for y in 1..h - 1 {
                    for x in 1..w - 1 {
                        m = m.max(t.get(b, ch, y, x).abs());
                    }
                }
            }
        }
        m
    }

    #[test]
    fn idg_closed_form_sum() {
        let x = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| (y * 3 + x + 1) as f64);
        let kb = KernelBank::from_fn(1, 1, 3, |_| 1.0);
        let c = IdgCenters::uniform(1, 1).unwrap();
        let y = forward_idg_explicit(&x, &kb, &c, Padding::None).unwrap();
        assert_eq!(y.data(), &[36.0]);
    }

    #[test]
    fn idg_rejects_bad_centers() {
        let x = Tensor::<f64>::zeros([1, 1, 4, 4]);
        let kb = KernelBank::<f64>::zeros(2, 1, 3);
        let c = IdgCenters::uniform(1, 3).unwrap();
        assert!(forward_idg_explicit(&x, &kb, &c, Padding::Zero(1)).is_err());
    }

    #[test]
    fn gradient_branches_vanish_on_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::full([2, 3, 7, 6], 0.8125);
        let kb = rand_bank(&mut rng, 4, 3);
        let c = IdgCenters::random(12, &mut rng);
        for branch in [BranchId::Idg, BranchId::Csg, BranchId::Hg, BranchId::Vg] {
            let y = forward_branch_explicit(branch, &x, &kb, Some(&c), Padding::Zero(1)).unwrap();
            assert!(interior_max(&y) <= 1e-10, "{branch}");
            let y = forward_branch_explicit(branch, &x, &kb, Some(&c), Padding::None).unwrap();
            assert!(y.max_abs() <= 1e-10, "{branch}");
        }
    }

    #[test]
    fn csg_uniform_kernel_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rand_tensor(&mut rng, [1, 2, 6, 6]);
        let kb = KernelBank::from_fn(3, 2, 3, |_| 0.37);
        let y = forward_csg_explicit(&x, &kb, Padding::Zero(1)).unwrap();
        assert!(y.max_abs() <= 1e-12);
    }

    #[test]
    fn hg_vg_directional_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let kb = rand_bank(&mut rng, 2, 1);
        let rows = Tensor::from_fn([1, 1, 6, 6], |[_, _, y, _]| y as f64 * 0.3);
        let cols = Tensor::from_fn([1, 1, 6, 6], |[_, _, _, x]| x as f64 * 0.3);
        let hg = forward_hg_explicit(&rows, &kb, Padding::None).unwrap();
        assert_eq!(hg.max_abs(), 0.0);
        let vg = forward_vg_explicit(&cols, &kb, Padding::None).unwrap();
        assert_eq!(vg.max_abs(), 0.0);
    }

    #[test]
    fn csa_constant_input_doubles() {
        let x = Tensor::full([1, 1, 5, 5], 0.6f64);
        let kb = KernelBank::from_fn(1, 1, 3, |_| 1.0 / 9.0);
        let y = forward_csa_explicit(&x, &kb, Padding::Zero(1)).unwrap();
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.get(0, 0, yy, xx) - 1.2).abs() < 1e-12);
            }
        }
        let zero = KernelBank::zeros(1, 1, 3);
        assert_eq!(forward_csa_explicit(&x, &zero, Padding::Zero(1)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn csa_mean_amplification() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let c = 0.45;
        let x = Tensor::full([1, 2, 6, 6], c);
        let kb = rand_bank(&mut rng, 3, 2);
        let y = forward_csa_explicit(&x, &kb, Padding::None).unwrap();
        for oc in 0..3 {
            let s: f64 = (0..2).map(|ic| kb.slice(oc, ic).iter().sum::<f64>()).sum();
            for v in y.plane(0, oc) {
                assert!((v - 2.0 * c * s).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn explicit_forms_match_transformed_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, [2, 3, 7, 9]);
            let kb = rand_bank(&mut rng, 4, 3);
            let c = IdgCenters::random(12, &mut rng);
            let zero = vec![0.0; 4];
            for branch in BranchId::ALL {
                let t = branch.transform_bank(&kb, Some(&c)).unwrap();
                for p in [Padding::None, Padding::Zero(1)] {
                    let via_conv = conv2d(&x, &t, &zero, p).unwrap();
                    let explicit = forward_branch_explicit(branch, &x, &kb, Some(&c), p).unwrap();
                    assert!(via_conv.max_abs_diff(&explicit).unwrap() <= 1e-10, "{branch}");
                }
            }
        }
    }
}
