//! Direct 2-D cross-correlation over NCHW tensors, plus the two adjoints
//! needed for backpropagation.
//!
//! Every output sample is accumulated in a fixed `(in-channel, ky, kx)`
//! order starting from the bias, so results do not depend on how rayon
//! splits the work.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Weights of shape `(out, in, k, k)`. Within a 3×3 slice positions are
/// numbered 1..=9 left-to-right, top-to-bottom; storage index is `pos - 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> KernelBank<T> {
    pub fn new(out_channels: usize, in_channels: usize, k: usize, data: Vec<T>) -> Result<Self> {
        let shape = [out_channels, in_channels, k, k];
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::InvalidArgument(format!(
                "kernel bank {shape:?} needs {len} weights, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, k: usize) -> Self {
        Self {
            shape: [out_channels, in_channels, k, k],
            data: vec![T::zero(); out_channels * in_channels * k * k],
        }
    }

    pub fn from_fn(
        out_channels: usize,
        in_channels: usize,
        k: usize,
        mut f: impl FnMut(usize) -> T,
    ) -> Self {
        let len = out_channels * in_channels * k * k;
        Self {
            shape: [out_channels, in_channels, k, k],
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// Builds a bank by applying `f` to every `(out, in)` slice of `self`.
    pub fn map_slices(&self, mut f: impl FnMut(usize, &[T], &mut [T])) -> Self {
        let kk = self.shape[2] * self.shape[3];
        let mut data = vec![T::zero(); self.data.len()];
        for (idx, (src, dst)) in self
            .data
            .chunks_exact(kk)
            .zip(data.chunks_exact_mut(kk))
            .enumerate()
        {
            f(idx, src, dst);
        }
        Self {
            shape: self.shape,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.shape[2]
    }

    /// Number of `(out, in)` slices.
    #[inline]
    pub fn slices(&self) -> usize {
        self.shape[0] * self.shape[1]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn slice(&self, o: usize, i: usize) -> &[T] {
        let kk = self.shape[2] * self.shape[3];
        let start = (o * self.shape[1] + i) * kk;
        &self.data[start..start + kk]
    }

    #[inline]
    pub fn slice_mut(&mut self, o: usize, i: usize) -> &mut [T] {
        let kk = self.shape[2] * self.shape[3];
        let start = (o * self.shape[1] + i) * kk;
        &mut self.data[start..start + kk]
    }

    pub fn cast<U: Scalar>(&self) -> KernelBank<U> {
        KernelBank {
            shape: self.shape,
            data: crate::tensor::cast_slice(&self.data),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: T, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    None,
    Zero(usize),
}

impl Padding {
    #[inline]
    pub fn amount(self) -> usize {
        match self {
            Padding::None => 0,
            Padding::Zero(p) => p,
        }
    }
}

/// Output extent of a stride-1 convolution, or `None` if the kernel does
/// not fit.
pub fn output_extent(input: usize, k: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad + 1).checked_sub(k)
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    kernel: &KernelBank<T>,
    bias: &[T],
    padding: Padding,
) -> Result<(usize, usize)> {
    if input.channels() != kernel.in_channels() {
        return Err(Error::shape("conv2d", &input.shape(), &kernel.shape()));
    }
    if bias.len() != kernel.out_channels() {
        return Err(Error::shape(
            "conv2d bias",
            &[bias.len()],
            &[kernel.out_channels()],
        ));
    }
    let (k, p) = (kernel.size(), padding.amount());
    if p >= k.max(1) {
        return Err(Error::InvalidArgument(format!(
            "padding {p} must be smaller than kernel size {k}"
        )));
    }
    match (
        output_extent(input.height(), k, p),
        output_extent(input.width(), k, p),
    ) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
        _ => Err(Error::shape("conv2d extent", &input.shape(), &kernel.shape())),
    }
}

/// Range of output columns `ox` for which `ox + kx - p` lands inside `0..w`.
#[inline]
fn valid_range(out: usize, inp: usize, kx: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(kx);
    let hi = (inp + p).saturating_sub(kx).min(out);
    (lo, hi.max(lo))
}

/// Stride-1 cross-correlation (no kernel flip) with optional zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &KernelBank<T>,
    bias: &[T],
    padding: Padding,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv(input, kernel, bias, padding)?;
    let [n, cin, h, w] = input.shape();
    let cout = kernel.out_channels();
    let (k, p) = (kernel.size(), padding.amount());
    let mut out = Tensor::zeros([n, cout, oh, ow]);

    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let (b, oc) = (plane_idx / cout, plane_idx % cout);
            dst.fill(bias[oc]);
            for ic in 0..cin {
                let src = input.plane(b, ic);
                let ker = kernel.slice(oc, ic);
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = ker[ky * k + kx];
                        let (x0, x1) = valid_range(ow, w, kx, p);
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let src_row = &src[(iy - p) * w..(iy - p + 1) * w];
                            let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                            for ox in x0..x1 {
                                dst_row[ox] += wgt * src_row[ox + kx - p];
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward_input<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &KernelBank<T>,
    input_shape: [usize; 4],
    padding: Padding,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input_shape;
    let [gn, cout, oh, ow] = grad_out.shape();
    if gn != n || cout != kernel.out_channels() || cin != kernel.in_channels() {
        return Err(Error::shape(
            "conv2d_backward_input",
            &grad_out.shape(),
            &kernel.shape(),
        ));
    }
    let (k, p) = (kernel.size(), padding.amount());
    let mut grad_in = Tensor::zeros(input_shape);

    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(plane_idx, dst)| {
            let (b, ic) = (plane_idx / cin, plane_idx % cin);
            for oc in 0..cout {
                let g = grad_out.plane(b, oc);
                let ker = kernel.slice(oc, ic);
                for ky in 0..k {
                    for kx in 0..k {
                        let wgt = ker[ky * k + kx];
                        let (x0, x1) = valid_range(ow, w, kx, p);
                        for oy in 0..oh {
                            let iy = oy + ky;
                            if iy < p || iy - p >= h {
                                continue;
                            }
                            let g_row = &g[oy * ow..(oy + 1) * ow];
                            let dst_row = &mut dst[(iy - p) * w..(iy - p + 1) * w];
                            for ox in x0..x1 {
                                dst_row[ox + kx - p] += wgt * g_row[ox];
                            }
                        }
                    }
                }
            }
        });
    Ok(grad_in)
}

/// Gradients of `conv2d` with respect to kernel and bias.
pub fn conv2d_backward_kernel<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    k: usize,
    padding: Padding,
) -> Result<(KernelBank<T>, Vec<T>)> {
    let [n, cin, h, w] = input.shape();
    let [gn, cout, oh, ow] = grad_out.shape();
    if gn != n {
        return Err(Error::shape(
            "conv2d_backward_kernel",
            &grad_out.shape(),
            &input.shape(),
        ));
    }
    let p = padding.amount();
    let mut gk = KernelBank::zeros(cout, cin, k);

    gk.data_mut()
        .par_chunks_mut(cin * k * k)
        .enumerate()
        .for_each(|(oc, dst)| {
            for ic in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let (x0, x1) = valid_range(ow, w, kx, p);
                        let mut acc = T::zero();
                        for b in 0..n {
                            let g = grad_out.plane(b, oc);
                            let src = input.plane(b, ic);
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < p || iy - p >= h {
                                    continue;
                                }
                                let g_row = &g[oy * ow..(oy + 1) * ow];
                                let src_row = &src[(iy - p) * w..(iy - p + 1) * w];
                                for ox in x0..x1 {
                                    acc += g_row[ox] * src_row[ox + kx - p];
                                }
                            }
                        }
                        dst[(ic * k + ky) * k + kx] = acc;
                    }
                }
            }
        });

    let gb = (0..cout)
        .map(|oc| {
            (0..n)
                .map(|b| grad_out.plane(b, oc).iter().copied().sum::<T>())
                .sum()
        })
        .collect();
    Ok((gk, gb))
}
