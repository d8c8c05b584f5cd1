//! Closed-form rewrites of each gradient/aggregation branch as an ordinary
//! 3×3 kernel, and their adjoints (used to pull fused-kernel gradients back
//! onto branch weights).
//!
//! All functions act on one 9-weight slice, positions 1..=9 stored at
//! indices 0..=8.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub type Slice9<T> = [T; 9];

/// Horizontal partner of each position within its row (`None` for the
/// middle column).
pub(crate) const HG_PARTNER: [Option<usize>; 9] = [
    Some(2),
    None,
    Some(0),
    Some(5),
    None,
    Some(3),
    Some(8),
    None,
    Some(6),
];

/// Vertical partner of each position within its column (`None` for the
/// middle row).
pub(crate) const VG_PARTNER: [Option<usize>; 9] = [
    Some(6),
    Some(7),
    Some(8),
    None,
    None,
    None,
    Some(0),
    Some(1),
    Some(2),
];

#[inline]
pub(crate) fn center_offset(j: u8) -> Result<usize> {
    if (1..=9).contains(&j) {
        Ok(j as usize - 1)
    } else {
        Err(Error::InvalidCenter(j))
    }
}

#[inline]
fn sum9<T: Scalar>(w: &Slice9<T>) -> T {
    w.iter().copied().fold(T::zero(), |a, b| a + b)
}

/// `ω*_i = ω_i` for `i ≠ j`, `ω*_j = ω_j − Σω`.
pub fn transform_idg<T: Scalar>(w: &Slice9<T>, j: u8) -> Result<Slice9<T>> {
    let c = center_offset(j)?;
    let mut out = *w;
    out[c] = w[c] - sum9(w);
    Ok(out)
}

/// `ω*_i = ω_i − mean(ω)`.
pub fn transform_csg<T: Scalar>(w: &Slice9<T>) -> Slice9<T> {
    let mean = sum9(w) / T::from_f64(9.0);
    w.map(|v| v - mean)
}

/// `ω*_i = ω_i + mean(ω)`.
pub fn transform_csa<T: Scalar>(w: &Slice9<T>) -> Slice9<T> {
    let mean = sum9(w) / T::from_f64(9.0);
    w.map(|v| v + mean)
}

fn transform_pairs<T: Scalar>(w: &Slice9<T>, partner: &[Option<usize>; 9]) -> Slice9<T> {
    let mut out = [T::zero(); 9];
    for (i, p) in partner.iter().enumerate() {
        if let Some(p) = *p {
            out[i] = w[i] - w[p];
        }
    }
    out
}

/// `{ω1−ω3, 0, ω3−ω1, ω4−ω6, 0, ω6−ω4, ω7−ω9, 0, ω9−ω7}`.
pub fn transform_hg<T: Scalar>(w: &Slice9<T>) -> Slice9<T> {
    transform_pairs(w, &HG_PARTNER)
}

/// `{ω1−ω7, ω2−ω8, ω3−ω9, 0, 0, 0, ω7−ω1, ω8−ω2, ω9−ω3}`.
pub fn transform_vg<T: Scalar>(w: &Slice9<T>) -> Slice9<T> {
    transform_pairs(w, &VG_PARTNER)
}

/// Adjoint of [`transform_idg`]: `g_i − g_j` for every `i`.
pub fn adjoint_idg<T: Scalar>(g: &Slice9<T>, j: u8) -> Result<Slice9<T>> {
    let c = center_offset(j)?;
    let gc = g[c];
    Ok(g.map(|v| v - gc))
}

// The csg, csa, hg and vg maps are symmetric, so they are their own adjoints.

pub fn adjoint_csg<T: Scalar>(g: &Slice9<T>) -> Slice9<T> {
    transform_csg(g)
}

pub fn adjoint_csa<T: Scalar>(g: &Slice9<T>) -> Slice9<T> {
    transform_csa(g)
}

pub fn adjoint_hg<T: Scalar>(g: &Slice9<T>) -> Slice9<T> {
    transform_hg(g)
}

pub fn adjoint_vg<T: Scalar>(g: &Slice9<T>) -> Slice9<T> {
    transform_vg(g)
}
