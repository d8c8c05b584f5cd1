//! The adaptive information interaction block and the full
//! super-resolution network assembled from DGConv layers.
//!
//! [`Dgpnet`] is generic over its layer types so the same topology serves
//! three roles:
//!
//! * [`DgpNetParams`]: trainable, every layer multi-branch;
//! * [`FusedDgpNet`]: every layer collapsed into one kernel bank;
//! * [`VconvNet`]: the vanilla-convolution twin used for cost parity.

mod backward;
mod cost;
mod se;

use rand::Rng;

use crate::dgconv::{
    fuse, BranchId, DgConvParams, FusedKernel, IdgCenters, PlainConv, SingleBranchConv,
};
use crate::error::{Error, Result};
use crate::params::{join, ParamMut, ParamRef, Parameterized};
use crate::tensor::{Scalar, Tensor};

pub use backward::{
    aiiblock_backward, aiiblock_forward_cached, conv_backward, BlockCache, NetCache,
};
pub use cost::{count_flops, count_params, vconv_param_formula, FlopReport, LayerCost};
pub use se::{se_backward, se_forward, se_forward_cached, SeCache, SeParams};

/// Negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DgpNetConfig {
    pub channels: usize,
    pub n_block: usize,
    pub scale: usize,
    pub in_channels: usize,
}

impl DgpNetConfig {
    pub fn full() -> Self {
        Self {
            channels: 64,
            n_block: 16,
            scale: 4,
            in_channels: 3,
        }
    }

    pub fn tiny() -> Self {
        Self {
            channels: 32,
            ..Self::full()
        }
    }

    pub fn micro() -> Self {
        Self {
            channels: 16,
            n_block: 2,
            scale: 2,
            in_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channels must be a positive multiple of 4, got {}",
                self.channels
            )));
        }
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::Config(format!(
                "scale must be 2 or 4, got {}",
                self.scale
            )));
        }
        if self.n_block == 0 {
            return Err(Error::Config("n_block must be at least 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        Ok(())
    }

    /// Hidden width of the SE gates: `C / 8` up to 32 channels, `C / 16`
    /// above, never below 2.
    pub fn se_hidden(&self) -> usize {
        let ratio = if self.channels <= 32 { 8 } else { 16 };
        (self.channels / ratio).max(2)
    }

    /// Number of ×2 pixel-shuffle stages.
    pub fn upsample_stages(&self) -> usize {
        match self.scale {
            4 => 2,
            _ => 1,
        }
    }
}

/// A 3×3, padding-1 convolution-like layer.
pub trait ConvLayer<T: Scalar>: Parameterized<T> + Clone {
    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>>;

    /// Multiply and add FLOPs (2 per MAC) of the convolution terms for an
    /// `h × w` output of one image.
    fn conv_flops(&self, h: usize, w: usize) -> u64;

    /// All FLOPs of the layer, including bias and branch combination.
    fn flops(&self, h: usize, w: usize) -> u64;
}

/// A layer made of multi-branch kernels that can be collapsed to one
/// kernel bank, and whose gradients are obtained by pulling back the
/// gradient of that kernel bank.
pub trait BranchedLayer<T: Scalar>: ConvLayer<T> {
    fn fuse_layer(&self) -> Result<FusedKernel<T>>;
    fn pullback(&self, grad: &PlainConv<T>) -> Result<Self>;
}

/// A layer that is a single vanilla convolution.
pub trait LinearConv<T: Scalar>: ConvLayer<T> {
    fn plain(&self) -> &PlainConv<T>;
}

fn vconv_flops(cin: usize, cout: usize, h: usize, w: usize) -> u64 {
    2 * (cout * cin * 9 * h * w) as u64
}

impl<T: Scalar> ConvLayer<T> for PlainConv<T> {
    fn in_channels(&self) -> usize {
        self.kernel.in_channels()
    }
    fn out_channels(&self) -> usize {
        self.kernel.out_channels()
    }
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        PlainConv::forward(self, x)
    }
    fn conv_flops(&self, h: usize, w: usize) -> u64 {
        vconv_flops(self.in_channels(), self.out_channels(), h, w)
    }
    fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv_flops(h, w) + (self.out_channels() * h * w) as u64
    }
}

impl<T: Scalar> LinearConv<T> for PlainConv<T> {
    fn plain(&self) -> &PlainConv<T> {
        self
    }
}

impl<T: Scalar> ConvLayer<T> for FusedKernel<T> {
    fn in_channels(&self) -> usize {
        self.kernel().in_channels()
    }
    fn out_channels(&self) -> usize {
        self.kernel().out_channels()
    }
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.conv().forward(x)
    }
    fn conv_flops(&self, h: usize, w: usize) -> u64 {
        self.conv().conv_flops(h, w)
    }
    fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv().flops(h, w)
    }
}

impl<T: Scalar> LinearConv<T> for FusedKernel<T> {
    fn plain(&self) -> &PlainConv<T> {
        self.conv()
    }
}

impl<T: Scalar> ConvLayer<T> for SingleBranchConv<T> {
    fn in_channels(&self) -> usize {
        self.kernel.in_channels()
    }
    fn out_channels(&self) -> usize {
        self.kernel.out_channels()
    }
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        SingleBranchConv::forward(self, x)
    }
    // Counted as the 3×3 convolution it is equivalent to.
    fn conv_flops(&self, h: usize, w: usize) -> u64 {
        vconv_flops(self.in_channels(), self.out_channels(), h, w)
    }
    fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv_flops(h, w) + (self.out_channels() * h * w) as u64
    }
}

impl<T: Scalar> BranchedLayer<T> for SingleBranchConv<T> {
    fn fuse_layer(&self) -> Result<FusedKernel<T>> {
        self.fuse()
    }
    fn pullback(&self, grad: &PlainConv<T>) -> Result<Self> {
        SingleBranchConv::pullback(self, grad)
    }
}

impl<T: Scalar> ConvLayer<T> for DgConvParams<T> {
    fn in_channels(&self) -> usize {
        DgConvParams::in_channels(self)
    }
    fn out_channels(&self) -> usize {
        DgConvParams::out_channels(self)
    }
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        DgConvParams::forward(self, x)
    }
    /// Six branch convolutions.
    fn conv_flops(&self, h: usize, w: usize) -> u64 {
        6 * vconv_flops(self.in_channels(), self.out_channels(), h, w)
    }
    /// Adds six scalings, five branch sums and the bias per output sample,
    /// plus the `6 × dim` factor head.
    fn flops(&self, h: usize, w: usize) -> u64 {
        let per_out = (self.out_channels() * h * w) as u64;
        self.conv_flops(h, w) + 12 * per_out + 2 * 6 * self.head().dim() as u64
    }
}

impl<T: Scalar> BranchedLayer<T> for DgConvParams<T> {
    fn fuse_layer(&self) -> Result<FusedKernel<T>> {
        fuse(self)
    }
    fn pullback(&self, grad: &PlainConv<T>) -> Result<Self> {
        DgConvParams::pullback(self, grad)
    }
}

/// Gradient branches (idg, csg, hg, vg) and contrast branches (vconv, csa)
/// as used inside the block.
pub const GRADIENT_BRANCHES: [BranchId; 4] =
    [BranchId::Idg, BranchId::Csg, BranchId::Hg, BranchId::Vg];
pub const CONTRAST_BRANCHES: [BranchId; 2] = [BranchId::Vconv, BranchId::Csa];
const ALIGN_NAMES: [&str; 4] = ["g1", "g2", "c1", "c2"];

/// One interaction block.
///
/// `align` holds the four cross-alignment layers in the order
/// `[X_g → X_g1, X_g → X_g2, X_c → X_c1, X_c → X_c2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AiiBlock<S, D, T> {
    pub gradient: [S; 4],
    pub contrast: [S; 2],
    pub align: [D; 4],
    pub se: [SeParams<T>; 2],
}

impl<S, D, T: Scalar> AiiBlock<S, D, T> {
    pub fn build(
        channels: usize,
        se_hidden: usize,
        mut single: impl FnMut(BranchId, usize, usize) -> S,
        mut dg: impl FnMut(usize, usize) -> D,
        mut se: impl FnMut(usize, usize) -> SeParams<T>,
    ) -> Self {
        let (q, h) = (channels / 4, channels / 2);
        let gradient = GRADIENT_BRANCHES.map(|b| single(b, channels, q));
        let contrast = CONTRAST_BRANCHES.map(|b| single(b, channels, h));
        let align = std::array::from_fn(|_| dg(channels, h));
        let se = std::array::from_fn(|_| se(channels, se_hidden));
        Self {
            gradient,
            contrast,
            align,
            se,
        }
    }

    /// Map the convolution layers; SE parameters are copied.
    pub fn try_map<S2, D2>(
        &self,
        mut fs: impl FnMut(&S) -> Result<S2>,
        mut fd: impl FnMut(&D) -> Result<D2>,
    ) -> Result<AiiBlock<S2, D2, T>> {
        let [g0, g1, g2, g3] = &self.gradient;
        let [c0, c1] = &self.contrast;
        let [a0, a1, a2, a3] = &self.align;
        Ok(AiiBlock {
            gradient: [fs(g0)?, fs(g1)?, fs(g2)?, fs(g3)?],
            contrast: [fs(c0)?, fs(c1)?],
            align: [fd(a0)?, fd(a1)?, fd(a2)?, fd(a3)?],
            se: self.se.clone(),
        })
    }
}

impl<S: Parameterized<T>, D: Parameterized<T>, T: Scalar> Parameterized<T> for AiiBlock<S, D, T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (b, l) in GRADIENT_BRANCHES.iter().zip(&self.gradient) {
            l.collect_params(&join(prefix, &format!("gradient.{b}")), out);
        }
        for (b, l) in CONTRAST_BRANCHES.iter().zip(&self.contrast) {
            l.collect_params(&join(prefix, &format!("contrast.{b}")), out);
        }
        for (n, l) in ALIGN_NAMES.iter().zip(&self.align) {
            l.collect_params(&join(prefix, &format!("align.{n}")), out);
        }
        for (i, s) in self.se.iter().enumerate() {
            s.collect_params(&join(prefix, &format!("se{i}")), out);
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (b, l) in GRADIENT_BRANCHES.iter().zip(self.gradient.iter_mut()) {
            l.collect_params_mut(&join(prefix, &format!("gradient.{b}")), out);
        }
        for (b, l) in CONTRAST_BRANCHES.iter().zip(self.contrast.iter_mut()) {
            l.collect_params_mut(&join(prefix, &format!("contrast.{b}")), out);
        }
        for (n, l) in ALIGN_NAMES.iter().zip(self.align.iter_mut()) {
            l.collect_params_mut(&join(prefix, &format!("align.{n}")), out);
        }
        for (i, s) in self.se.iter_mut().enumerate() {
            s.collect_params_mut(&join(prefix, &format!("se{i}")), out);
        }
    }
}

/// `O = X + SE₀(cat(X_g1, X_c2)) + SE₁(cat(X_c1, X_g2))` with
/// `X_g = cat(idg, csg, hg, vg)(X)` and `X_c = cat(vconv, csa)(X)`.
pub fn aiiblock_forward<S, D, T>(x: &Tensor<T>, block: &AiiBlock<S, D, T>) -> Result<Tensor<T>>
where
    S: ConvLayer<T>,
    D: ConvLayer<T>,
    T: Scalar,
{
    let slope = T::from_f64(LEAKY_SLOPE);
    let g = block
        .gradient
        .iter()
        .map(|l| l.forward(x).map(|y| y.leaky_relu(slope)))
        .collect::<Result<Vec<_>>>()?;
    let c = block
        .contrast
        .iter()
        .map(|l| l.forward(x).map(|y| y.leaky_relu(slope)))
        .collect::<Result<Vec<_>>>()?;
    let xg = Tensor::concat_channels(&g.iter().collect::<Vec<_>>())?;
    let xc = Tensor::concat_channels(&c.iter().collect::<Vec<_>>())?;
    let xg1 = block.align[0].forward(&xg)?;
    let xg2 = block.align[1].forward(&xg)?;
    let xc1 = block.align[2].forward(&xc)?;
    let xc2 = block.align[3].forward(&xc)?;
    let s0 = se_forward(&Tensor::concat_channels(&[&xg1, &xc2])?, &block.se[0])?;
    let s1 = se_forward(&Tensor::concat_channels(&[&xc1, &xg2])?, &block.se[1])?;
    let mut out = x.clone();
    out.add_assign(&s0)?;
    out.add_assign(&s1)?;
    Ok(out)
}

/// The whole network: head layer, interaction blocks, ×2 pixel-shuffle
/// stages, tail layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dgpnet<S, D, T> {
    pub config: DgpNetConfig,
    pub head: D,
    pub blocks: Vec<AiiBlock<S, D, T>>,
    pub upsampler: Vec<D>,
    pub tail: D,
}

pub type DgpNetParams<T> = Dgpnet<SingleBranchConv<T>, DgConvParams<T>, T>;
pub type FusedDgpNet<T> = Dgpnet<FusedKernel<T>, FusedKernel<T>, T>;
pub type VconvNet<T> = Dgpnet<PlainConv<T>, PlainConv<T>, T>;

impl<S, D, T: Scalar> Dgpnet<S, D, T> {
    pub fn build(
        config: DgpNetConfig,
        mut single: impl FnMut(BranchId, usize, usize) -> S,
        mut dg: impl FnMut(usize, usize) -> D,
        mut se: impl FnMut(usize, usize) -> SeParams<T>,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let head = dg(config.in_channels, c);
        let blocks = (0..config.n_block)
            .map(|_| AiiBlock::build(c, config.se_hidden(), &mut single, &mut dg, &mut se))
            .collect();
        let upsampler = (0..config.upsample_stages()).map(|_| dg(c, 4 * c)).collect();
        let tail = dg(c, config.in_channels);
        Ok(Self {
            config,
            head,
            blocks,
            upsampler,
            tail,
        })
    }

    pub fn try_map<S2, D2>(
        &self,
        mut fs: impl FnMut(&S) -> Result<S2>,
        mut fd: impl FnMut(&D) -> Result<D2>,
    ) -> Result<Dgpnet<S2, D2, T>> {
        Ok(Dgpnet {
            config: self.config,
            head: fd(&self.head)?,
            blocks: self
                .blocks
                .iter()
                .map(|b| b.try_map(&mut fs, &mut fd))
                .collect::<Result<_>>()?,
            upsampler: self.upsampler.iter().map(&mut fd).collect::<Result<_>>()?,
            tail: fd(&self.tail)?,
        })
    }
}

impl<S, D, T> Dgpnet<S, D, T>
where
    S: ConvLayer<T>,
    D: ConvLayer<T>,
    T: Scalar,
{
    /// Super-resolve a `(n, in_channels, h, w)` batch to
    /// `(n, in_channels, s·h, s·w)`.
    pub fn forward(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(lr)?;
        let slope = T::from_f64(LEAKY_SLOPE);
        let mut x = self.head.forward(lr)?.leaky_relu(slope);
        for block in &self.blocks {
            x = aiiblock_forward(&x, block)?;
        }
        for stage in &self.upsampler {
            x = stage.forward(&x)?.pixel_shuffle(2)?;
        }
        self.tail.forward(&x)
    }

    pub(crate) fn check_input(&self, lr: &Tensor<T>) -> Result<()> {
        if lr.channels() != self.config.in_channels {
            return Err(Error::shape(
                "dgpnet_forward",
                &lr.shape(),
                &[lr.batch(), self.config.in_channels],
            ));
        }
        if lr.height() < 3 || lr.width() < 3 {
            return Err(Error::InvalidArgument(format!(
                "input {}x{} is smaller than 3x3",
                lr.height(),
                lr.width()
            )));
        }
        Ok(())
    }
}

impl<S: Parameterized<T>, D: Parameterized<T>, T: Scalar> Parameterized<T> for Dgpnet<S, D, T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.head.collect_params(&join(prefix, "head"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&join(prefix, &format!("blocks.{i}")), out);
        }
        for (i, u) in self.upsampler.iter().enumerate() {
            u.collect_params(&join(prefix, &format!("upsampler.{i}")), out);
        }
        self.tail.collect_params(&join(prefix, "tail"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.head.collect_params_mut(&join(prefix, "head"), out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        for (i, u) in self.upsampler.iter_mut().enumerate() {
            u.collect_params_mut(&join(prefix, &format!("upsampler.{i}")), out);
        }
        self.tail.collect_params_mut(&join(prefix, "tail"), out);
    }
}

impl<T: Scalar> DgpNetParams<T> {
    /// Random initialization; every stochastic choice comes from `rng`.
    pub fn init<R: Rng + ?Sized>(config: DgpNetConfig, rng: &mut R) -> Result<Self> {
        // Closures share the generator; build order is deterministic.
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            config,
            |b, ci, co| SingleBranchConv::init(b, ci, co, &mut **rng.borrow_mut()),
            |ci, co| DgConvParams::init(ci, co, &mut **rng.borrow_mut()),
            |c, h| SeParams::init(c, h, &mut **rng.borrow_mut()),
        )
    }

    /// Every parameter zero (including factor-head offsets), IDG centers 1.
    pub fn zeros(config: DgpNetConfig) -> Result<Self> {
        Self::build(
            config,
            SingleBranchConv::zeros,
            DgConvParams::zeros,
            SeParams::zeros,
        )
    }

    pub fn cast<U: Scalar>(&self) -> DgpNetParams<U> {
        Dgpnet {
            config: self.config,
            head: self.head.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| AiiBlock {
                    gradient: b.gradient.each_ref().map(|l| l.cast()),
                    contrast: b.contrast.each_ref().map(|l| l.cast()),
                    align: b.align.each_ref().map(|l| l.cast()),
                    se: b.se.each_ref().map(|s| s.cast()),
                })
                .collect(),
            upsampler: self.upsampler.iter().map(|l| l.cast()).collect(),
            tail: self.tail.cast(),
        }
    }

    /// Every IDG center list in the network, named like the parameters,
    /// in parameter order.
    pub fn idg_centers(&self) -> Vec<(String, IdgCenters)> {
        let mut out = Vec::new();
        // Cloning keeps the traversal in one place.
        let mut copy = self.clone();
        copy.visit_centers_mut(&mut |name, c| {
            out.push((name, c.clone()));
            Ok(())
        })
        .expect("infallible");
        out
    }

    /// Visit every IDG center list mutably, in the order of [`Self::idg_centers`].
    pub(crate) fn visit_centers_mut(
        &mut self,
        f: &mut dyn FnMut(String, &mut IdgCenters) -> Result<()>,
    ) -> Result<()> {
        f("head".into(), self.head.idg_centers_mut())?;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (br, l) in GRADIENT_BRANCHES.iter().zip(b.gradient.iter_mut()) {
                if let Some(c) = l.centers.as_mut() {
                    f(format!("blocks.{i}.gradient.{br}"), c)?;
                }
            }
            for (br, l) in CONTRAST_BRANCHES.iter().zip(b.contrast.iter_mut()) {
                if let Some(c) = l.centers.as_mut() {
                    f(format!("blocks.{i}.contrast.{br}"), c)?;
                }
            }
            for (n, l) in ALIGN_NAMES.iter().zip(b.align.iter_mut()) {
                f(format!("blocks.{i}.align.{n}"), l.idg_centers_mut())?;
            }
        }
        for (i, u) in self.upsampler.iter_mut().enumerate() {
            f(format!("upsampler.{i}"), u.idg_centers_mut())?;
        }
        f("tail".into(), self.tail.idg_centers_mut())
    }
}

impl<S: BranchedLayer<T>, D: BranchedLayer<T>, T: Scalar> Dgpnet<S, D, T> {
    /// Gradient of the loss with respect to every parameter, given the
    /// gradient with respect to the fused network's parameters.
    pub fn pullback(&self, grad: &VconvNet<T>) -> Result<Self> {
        let mut it_s = Vec::new();
        let mut it_d = Vec::new();
        grad.try_map(
            |s| {
                it_s.push(s.clone());
                Ok(())
            },
            |d| {
                it_d.push(d.clone());
                Ok(())
            },
        )?;
        let mut gs = it_s.into_iter();
        let mut gd = it_d.into_iter();
        let mut out = self.try_map(
            |s| s.pullback(&gs.next().expect("same topology")),
            |d| d.pullback(&gd.next().expect("same topology")),
        )?;
        // SE parameters are not fused; their gradients pass through as is.
        for (dst, src) in out.blocks.iter_mut().zip(&grad.blocks) {
            dst.se = src.se.clone();
        }
        Ok(out)
    }
}

/// Replace every multi-branch layer by its fused kernel bank.
pub fn fuse_network<S, D, T>(net: &Dgpnet<S, D, T>) -> Result<FusedDgpNet<T>>
where
    S: BranchedLayer<T>,
    D: BranchedLayer<T>,
    T: Scalar,
{
    net.try_map(|s| s.fuse_layer(), |d| d.fuse_layer())
}

impl<T: Scalar> VconvNet<T> {
    /// The vanilla-convolution twin: same topology, each layer one plain
    /// 3×3 convolution with the same channel counts.
    pub fn init<R: Rng + ?Sized>(config: DgpNetConfig, rng: &mut R) -> Result<Self> {
        let rng = std::cell::RefCell::new(rng);
        Self::build(
            config,
            |_, ci, co| PlainConv::init(ci, co, &mut **rng.borrow_mut()),
            |ci, co| PlainConv::init(ci, co, &mut **rng.borrow_mut()),
            |c, h| SeParams::init(c, h, &mut **rng.borrow_mut()),
        )
    }

    pub fn zeros(config: DgpNetConfig) -> Result<Self> {
        Self::build(
            config,
            |_, ci, co| PlainConv::zeros(ci, co),
            PlainConv::zeros,
            SeParams::zeros,
        )
    }
}

impl<T: Scalar> FusedDgpNet<T> {
    pub(crate) fn zeros(config: DgpNetConfig) -> Result<Self> {
        let z = |ci, co| FusedKernel::from_plain(PlainConv::zeros(ci, co));
        Self::build(config, |_, ci, co| z(ci, co), z, SeParams::zeros)
    }

    pub fn cast<U: Scalar>(&self) -> FusedDgpNet<U> {
        Dgpnet {
            config: self.config,
            head: self.head.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| AiiBlock {
                    gradient: b.gradient.each_ref().map(|l| l.cast()),
                    contrast: b.contrast.each_ref().map(|l| l.cast()),
                    align: b.align.each_ref().map(|l| l.cast()),
                    se: b.se.each_ref().map(|s| s.cast()),
                })
                .collect(),
            upsampler: self.upsampler.iter().map(|l| l.cast()).collect(),
            tail: self.tail.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_input(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(DgpNetConfig::micro().validate().is_ok());
        for bad in [
            DgpNetConfig { channels: 18, ..DgpNetConfig::micro() },
            DgpNetConfig { scale: 3, ..DgpNetConfig::micro() },
            DgpNetConfig { n_block: 0, ..DgpNetConfig::micro() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert_eq!(DgpNetConfig::micro().se_hidden(), 2);
        assert_eq!(DgpNetConfig::full().se_hidden(), 4);
        assert_eq!(DgpNetConfig { channels: 8, ..DgpNetConfig::micro() }.se_hidden(), 2);
    }

    #[test]
    fn zero_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = DgpNetParams::<f64>::zeros(DgpNetConfig::micro()).unwrap();
        let x = Tensor::from_fn([2, 16, 5, 6], |_| rng.random_range(-1.0..1.0));
        let y = aiiblock_forward(&x, &net.blocks[0]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_net_with_tail_bias_is_constant() {
        let mut net = DgpNetParams::<f64>::zeros(DgpNetConfig::micro()).unwrap();
        net.tail.bias_mut().copy_from_slice(&[0.25, 0.5, 0.75]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = net.forward(&rand_input(&mut rng, [1, 3, 16, 16])).unwrap();
        assert_eq!(y.shape(), [1, 3, 32, 32]);
        for (c, b) in [0.25, 0.5, 0.75].into_iter().enumerate() {
            assert!(y.plane(0, c).iter().all(|&v| v == b));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = DgpNetParams::<f64>::zeros(DgpNetConfig::micro()).unwrap();
        assert!(net.forward(&Tensor::zeros([1, 1, 8, 8])).is_err());
        assert!(net.forward(&Tensor::zeros([1, 3, 2, 8])).is_err());
    }

    #[test]
    fn gradient_features_vanish_on_constant_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = DgpNetParams::<f64>::init(DgpNetConfig::micro(), &mut rng).unwrap();
        let x = Tensor::full([1, 16, 6, 6], 0.7);
        for l in &net.blocks[0].gradient {
            let y = l.forward(&x).unwrap();
            // Interior samples see no padding.
            for c in 0..y.channels() {
                for yy in 1..5 {
                    for xx in 1..5 {
                        assert!((y.get(0, c, yy, xx) - l.bias[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn fused_network_matches_branched() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DgpNetParams::<f64>::init(DgpNetConfig::micro(), &mut rng).unwrap();
        let fused = fuse_network(&net).unwrap();
        let x = rand_input(&mut rng, [1, 3, 8, 8]);
        let d = net.forward(&x).unwrap().max_abs_diff(&fused.forward(&x).unwrap()).unwrap();
        assert!(d <= 1e-9, "{d}");

        let net32 = net.cast::<f32>();
        let fused32 = fuse_network(&net32).unwrap();
        let x32 = x.cast::<f32>();
        let d = net32
            .forward(&x32)
            .unwrap()
            .max_abs_diff(&fused32.forward(&x32).unwrap())
            .unwrap();
        assert!(d <= 1e-4, "{d}");
    }

    #[test]
    fn zero_network_fuses_to_zero() {
        let net = DgpNetParams::<f64>::zeros(DgpNetConfig::micro()).unwrap();
        let fused = fuse_network(&net).unwrap();
        assert_eq!(fused, FusedDgpNet::zeros(DgpNetConfig::micro()).unwrap());
    }

    #[test]
    fn parameter_parity_with_vanilla_twin() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cfg in [DgpNetConfig::micro(), DgpNetConfig { scale: 4, ..DgpNetConfig::micro() }] {
            let net = DgpNetParams::<f32>::init(cfg, &mut rng).unwrap();
            let fused = fuse_network(&net).unwrap();
            let twin = VconvNet::<f32>::zeros(cfg).unwrap();
            assert_eq!(count_params(&fused), count_params(&twin));
            assert_eq!(count_params(&twin), vconv_param_formula(&cfg));
            assert!(count_params(&net) > count_params(&fused));
        }
        assert_eq!(PlainConv::<f32>::zeros(3, 64).param_count(), 1792);
    }

    #[test]
    fn capacity_grows_with_width() {
        let counts: Vec<usize> = [64, 32, 16]
            .into_iter()
            .map(|c| {
                vconv_param_formula(&DgpNetConfig {
                    channels: c,
                    ..DgpNetConfig::micro()
                })
            })
            .collect();
        assert!(counts[0] > counts[1] && counts[1] > counts[2]);
    }

    #[test]
    fn flop_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = DgpNetConfig::micro();
        let net = DgpNetParams::<f32>::init(cfg, &mut rng).unwrap();
        let fused = fuse_network(&net).unwrap();
        let twin = VconvNet::<f32>::zeros(cfg).unwrap();
        let (rb, rf, rt) = (
            count_flops(&net, 16, 16),
            count_flops(&fused, 16, 16),
            count_flops(&twin, 16, 16),
        );
        assert_eq!(rf, rt);
        assert_eq!(rf.layers.last().unwrap().height, 32);
        assert_eq!(rf.layers[0].conv_flops, 2 * 16 * 3 * 9 * 256);
        for (b, f) in rb.layers.iter().zip(&rf.layers) {
            if b.name.contains("gradient") || b.name.contains("contrast") {
                assert_eq!(b.conv_flops, f.conv_flops);
            } else {
                assert!(b.conv_flops >= 6 * f.conv_flops);
            }
        }
        assert!(rb.total_flops > rf.total_flops);
    }

    #[test]
    fn param_names_are_unique_and_ordered() {
        let net = DgpNetParams::<f32>::zeros(DgpNetConfig::micro()).unwrap();
        let names: Vec<String> = net.params().into_iter().map(|p| p.name).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert_eq!(names[0], "head.kernel.vconv");
        assert!(names.contains(&"blocks.1.se1.expand.bias".to_string()));
        assert_eq!(names.last().unwrap(), "tail.bias");
        let centers = net.idg_centers();
        assert_eq!(centers[0].0, "head");
        assert!(centers.iter().any(|(n, _)| n == "blocks.0.gradient.idg"));
    }
}
