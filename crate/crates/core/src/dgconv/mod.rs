//! Adaptive directional gradient convolution.
//!
//! A DGConv layer runs six 3×3 branches in parallel (vanilla, irregular
//! directional gradient, center-surrounding gradient, horizontal and
//! vertical gradient, center-surrounding aggregation), each with its own
//! kernel bank, and sums them with six scalar factors computed by an affine
//! map over the concatenated weights. Every branch is linear in its input,
//! so the whole layer collapses to one ordinary kernel bank
//! ([`fuse`]) for inference.

mod explicit;
mod layer;
mod transform;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::conv::KernelBank;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub use explicit::{
    forward_branch_explicit, forward_csa_explicit, forward_csg_explicit, forward_hg_explicit,
    forward_idg_explicit, forward_vconv, forward_vg_explicit,
};
pub use layer::{
    compute_alphas, forward_branched, forward_branched_with_alphas, forward_fused, fuse,
    AlphaVector, DgConvParams, FusedKernel, FusionHead, PlainConv, SingleBranchConv,
};
pub use transform::{
    adjoint_csa, adjoint_csg, adjoint_hg, adjoint_idg, adjoint_vg, transform_csa, transform_csg,
    transform_hg, transform_idg, transform_vg, Slice9,
};

/// The six branches, in the fixed order used for weight concatenation and
/// for the factor vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BranchId {
    Vconv,
    Idg,
    Csg,
    Hg,
    Vg,
    Csa,
}

impl BranchId {
    pub const ALL: [BranchId; 6] = [
        BranchId::Vconv,
        BranchId::Idg,
        BranchId::Csg,
        BranchId::Hg,
        BranchId::Vg,
        BranchId::Csa,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchId::Vconv => "vconv",
            BranchId::Idg => "idg",
            BranchId::Csg => "csg",
            BranchId::Hg => "hg",
            BranchId::Vg => "vg",
            BranchId::Csa => "csa",
        }
    }

    /// True for the four branches whose fused kernels sum to zero.
    pub fn is_gradient(self) -> bool {
        matches!(
            self,
            BranchId::Idg | BranchId::Csg | BranchId::Hg | BranchId::Vg
        )
    }

    /// Rewrite one slice of this branch as a plain 3×3 kernel slice.
    pub fn transform<T: Scalar>(self, w: &Slice9<T>, center: u8) -> Result<Slice9<T>> {
        Ok(match self {
            BranchId::Vconv => *w,
            BranchId::Idg => transform_idg(w, center)?,
            BranchId::Csg => transform_csg(w),
            BranchId::Hg => transform_hg(w),
            BranchId::Vg => transform_vg(w),
            BranchId::Csa => transform_csa(w),
        })
    }

    pub fn adjoint<T: Scalar>(self, g: &Slice9<T>, center: u8) -> Result<Slice9<T>> {
        Ok(match self {
            BranchId::Vconv => *g,
            BranchId::Idg => adjoint_idg(g, center)?,
            BranchId::Csg => adjoint_csg(g),
            BranchId::Hg => adjoint_hg(g),
            BranchId::Vg => adjoint_vg(g),
            BranchId::Csa => adjoint_csa(g),
        })
    }

    /// Apply [`transform`](Self::transform) to every slice of a bank. The
    /// centers are only consulted for [`BranchId::Idg`].
    pub fn transform_bank<T: Scalar>(
        self,
        bank: &KernelBank<T>,
        centers: Option<&IdgCenters>,
    ) -> Result<KernelBank<T>> {
        self.map_bank(bank, centers, |b, w, c| b.transform(w, c))
    }

    pub fn adjoint_bank<T: Scalar>(
        self,
        grad: &KernelBank<T>,
        centers: Option<&IdgCenters>,
    ) -> Result<KernelBank<T>> {
        self.map_bank(grad, centers, |b, g, c| b.adjoint(g, c))
    }

    fn map_bank<T: Scalar>(
        self,
        bank: &KernelBank<T>,
        centers: Option<&IdgCenters>,
        f: impl Fn(BranchId, &Slice9<T>, u8) -> Result<Slice9<T>>,
    ) -> Result<KernelBank<T>> {
        if bank.size() != 3 {
            return Err(Error::InvalidArgument(format!(
                "directional branches need 3x3 kernels, got {0}x{0}",
                bank.size()
            )));
        }
        let centers = match (self, centers) {
            (BranchId::Idg, None) => {
                return Err(Error::InvalidArgument("idg branch needs centers".into()))
            }
            (BranchId::Idg, Some(c)) => {
                c.check_len(bank.slices())?;
                Some(c)
            }
            _ => None,
        };
        let mut err = None;
        let out = bank.map_slices(|idx, src, dst| {
            let src: &Slice9<T> = src.try_into().expect("3x3 slice");
            let j = centers.map_or(5, |c| c.get(idx));
            match f(self, src, j) {
                Ok(v) => dst.copy_from_slice(&v),
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BranchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BranchId::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown branch `{s}`")))
    }
}

/// One IDG center position (1..=9) per `(out, in)` kernel slice, stored
/// out-major like the kernel bank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdgCenters(Vec<u8>);

impl IdgCenters {
    pub fn new(centers: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = centers.iter().find(|c| !(1..=9).contains(*c)) {
            return Err(Error::InvalidCenter(bad));
        }
        Ok(Self(centers))
    }

    /// Centers drawn uniformly from 1..=9.
    pub fn random<R: Rng + ?Sized>(slices: usize, rng: &mut R) -> Self {
        Self((0..slices).map(|_| rng.random_range(1..=9u8)).collect())
    }

    pub fn uniform(slices: usize, center: u8) -> Result<Self> {
        Self::new(vec![center; slices])
    }

    #[inline]
    pub fn get(&self, slice: usize) -> u8 {
        self.0[slice]
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn check_len(&self, slices: usize) -> Result<()> {
        if self.0.len() != slices {
            return Err(Error::shape("idg centers", &[self.0.len()], &[slices]));
        }
        Ok(())
    }

    /// Digit string, e.g. `"3915"`.
    pub fn to_digits(&self) -> String {
        self.0.iter().map(|&c| char::from(b'0' + c)).collect()
    }

    pub fn from_digits(s: &str) -> Result<Self> {
        let v = s
            .bytes()
            .map(|b| match b {
                b'1'..=b'9' => Ok(b - b'0'),
                _ => Err(Error::Format(format!(
                    "bad IDG center digit `{}`",
                    char::from(b)
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn branch_order_is_fixed() {
        let names: Vec<_> = BranchId::ALL.iter().map(|b| b.name()).collect();
        assert_eq!(names, ["vconv", "idg", "csg", "hg", "vg", "csa"]);
        for (i, b) in BranchId::ALL.iter().enumerate() {
            assert_eq!(b.index(), i);
            assert_eq!(b.name().parse::<BranchId>().unwrap(), *b);
        }
    }

    #[test]
    fn centers_validate_and_roundtrip() {
        assert!(IdgCenters::new(vec![1, 9, 0]).is_err());
        let c = IdgCenters::new(vec![1, 5, 9, 3]).unwrap();
        assert_eq!(c.to_digits(), "1593");
        assert_eq!(IdgCenters::from_digits("1593").unwrap(), c);
        assert!(IdgCenters::from_digits("105").is_err());
    }

    #[test]
    fn random_centers_cover_all_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = IdgCenters::random(64 * 64, &mut rng);
        for j in 1..=9u8 {
            assert!(c.as_slice().contains(&j), "center {j} never drawn");
        }
    }
}
