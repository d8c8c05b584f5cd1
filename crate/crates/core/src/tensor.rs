//! Dense NCHW tensors and the shape-level primitives the rest of the crate
//! is built from.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point sample type. Implemented for `f32` (training and
/// inference) and `f64` (verification).
pub trait Scalar:
    Float + Debug + Default + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Cast a slice between scalar types.
pub fn cast_slice<A: Scalar, B: Scalar>(src: &[A]) -> Vec<B> {
    src.iter().map(|v| B::from_f64(v.as_f64())).collect()
}

/// A 4-D `(batch, channels, height, width)` tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::InvalidArgument(format!(
                "tensor of shape {shape:?} needs {len} samples, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 4], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([b, ch, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// One `h × w` channel plane.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: cast_slice(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub(crate) fn expect_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        self.map(|v| leaky_relu(v, slope))
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs().as_f64()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-channel spatial mean, shape `(n, c, 1, 1)`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if h * w == 0 {
            return Err(Error::InvalidArgument(
                "global_avg_pool on an empty spatial extent".into(),
            ));
        }
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let mut out = Vec::with_capacity(n * c);
        for b in 0..n {
            for ch in 0..c {
                let s: T = self.plane(b, ch).iter().copied().sum();
                out.push(s * inv);
            }
        }
        Ok(Self {
            shape: [n, c, 1, 1],
            data: out,
        })
    }

    /// Concatenate along the channel axis, preserving part order.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(Error::shape("concat_channels", &first.shape, &p.shape));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for p in parts {
                let chunk = p.shape[1] * h * w;
                data.extend_from_slice(&p.data[b * chunk..(b + 1) * chunk]);
            }
        }
        Ok(Self {
            shape: [n, c_total, h, w],
            data,
        })
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > c {
            return Err(Error::InvalidArgument(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Self {
            shape: [n, len, h, w],
            data,
        })
    }

    /// Batch items `start..start + len`.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > n {
            return Err(Error::InvalidArgument(format!(
                "batch slice {start}..{} out of range for batch {n}",
                start + len
            )));
        }
        let item = c * h * w;
        Ok(Self {
            shape: [len, c, h, w],
            data: self.data[start * item..(start + len) * item].to_vec(),
        })
    }

    /// Stack tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack_batch", &first.shape, &t.shape));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self {
            shape: [n, c, h, w],
            data,
        })
    }

    /// Sub-pixel rearrangement `(n, c·r², h, w) -> (n, c, r·h, r·w)`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::InvalidArgument(format!(
                "pixel_shuffle: {c} channels not divisible by {r}²"
            )));
        }
        let oc = c / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut data = vec![T::zero(); self.data.len()];
        for b in 0..n {
            for co in 0..oc {
                for dy in 0..r {
                    for dx in 0..r {
                        let src = self.plane(b, co * r * r + dy * r + dx);
                        let dst_base = (b * oc + co) * oh * ow;
                        for y in 0..h {
                            let row = dst_base + (y * r + dy) * ow + dx;
                            for x in 0..w {
                                data[row + x * r] = src[y * w + x];
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            shape: [n, oc, oh, ow],
            data,
        })
    }

    /// Inverse of [`pixel_shuffle`](Self::pixel_shuffle).
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::InvalidArgument(format!(
                "pixel_unshuffle: {h}x{w} not divisible by {r}"
            )));
        }
        let (ih, iw) = (h / r, w / r);
        let oc = c * r * r;
        let mut data = vec![T::zero(); self.data.len()];
        for b in 0..n {
            for ci in 0..c {
                let src = self.plane(b, ci);
                for dy in 0..r {
                    for dx in 0..r {
                        let dst_base = ((b * oc) + ci * r * r + dy * r + dx) * ih * iw;
                        for y in 0..ih {
                            for x in 0..iw {
                                data[dst_base + y * iw + x] = src[(y * r + dy) * w + x * r + dx];
                            }
                        }
                    }
                }
            }
        }
        Ok(Self {
            shape: [n, oc, ih, iw],
            data,
        })
    }
}

#[inline]
pub fn leaky_relu<T: Scalar>(v: T, slope: T) -> T {
    if v >= T::zero() {
        v
    } else {
        slope * v
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor::<f32>::new([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn pixel_shuffle_small_case() {
        let t = Tensor::new([1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = t.pixel_shuffle(2).unwrap();
        assert_eq!(s.shape(), [1, 1, 2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_r1_is_identity() {
        let t = random([2, 3, 4, 5], 1);
        assert_eq!(t.pixel_shuffle(1).unwrap(), t);
    }

    #[test]
    fn pixel_shuffle_matches_index_formula() {
        let r = 2;
        let t = random([2, 8, 3, 3], 2);
        let s = t.pixel_shuffle(r).unwrap();
        assert_eq!(s.shape(), [2, 2, 6, 6]);
        for n in 0..2 {
            for c in 0..2 {
                for y in 0..6 {
                    for x in 0..6 {
                        let (dy, dx) = (y % r, x % r);
                        let src = t.get(n, c * r * r + dy * r + dx, y / r, x / r);
                        assert_eq!(s.get(n, c, y, x), src);
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_rejects_bad_channels() {
        let t = random([1, 6, 2, 2], 3);
        assert!(t.pixel_shuffle(2).is_err());
    }

    #[test]
    fn global_avg_pool_cases() {
        let t = Tensor::full([1, 1, 3, 3], 7.0);
        assert_eq!(t.global_avg_pool().unwrap().data(), &[7.0]);
        let t = Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.global_avg_pool().unwrap().data(), &[2.5]);
        let t = random([2, 3, 5, 4], 4);
        let p = t.global_avg_pool().unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for y in 0..5 {
                    for x in 0..4 {
                        s += t.get(n, c, y, x);
                    }
                }
                assert!((p.get(n, c, 0, 0) - s / 20.0).abs() <= 1e-12);
            }
        }
        assert!(Tensor::<f64>::zeros([1, 1, 0, 3]).global_avg_pool().is_err());
    }

    #[test]
    fn concat_ordering_and_single() {
        let a = random([1, 2, 3, 3], 5);
        let b = random([1, 3, 3, 3], 6);
        assert_eq!(Tensor::concat_channels(&[&a]).unwrap(), a);
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), [1, 5, 3, 3]);
        assert_eq!(c.plane(0, 2), b.plane(0, 0));
        let bad = random([1, 1, 2, 3], 7);
        assert!(Tensor::concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn elementwise_suite() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(leaky_relu(-1.0f64, 0.2), -0.2);
        assert_eq!(leaky_relu(3.0f64, 0.2), 3.0);
        let a = random([2, 2, 3, 3], 8);
        let z = a.add(&a.scale(-1.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(a.add(&random([2, 2, 3, 2], 9)).is_err());
    }

    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn unshuffle_inverts_shuffle(
            seed in any::<u64>(), r in 1usize..4, n in 1usize..3,
            c in 1usize..4, h in 1usize..5, w in 1usize..5,
        ) {
            let t = random([n, c * r * r, h, w], seed);
            let s = t.pixel_shuffle(r).unwrap();
            prop_assert_eq!(s.shape(), [n, c, h * r, w * r]);
            prop_assert_eq!(s.pixel_unshuffle(r).unwrap(), t);
        }

        #[test]
        fn slices_recover_concat_parts(
            seed in any::<u64>(), sizes in prop::collection::vec(1usize..4, 1..5),
            h in 1usize..4, w in 1usize..4,
        ) {
            let parts: Vec<Tensor<f64>> = sizes
                .iter()
                .enumerate()
                .map(|(i, &c)| random([2, c, h, w], seed.wrapping_add(i as u64)))
                .collect();
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            let cat = Tensor::concat_channels(&refs).unwrap();
            prop_assert_eq!(cat.channels(), sizes.iter().sum::<usize>());
            let mut start = 0;
            for p in &parts {
                prop_assert_eq!(&cat.slice_channels(start, p.channels()).unwrap(), p);
                start += p.channels();
            }
        }
    }
}
