use rand::Rng;

use super::explicit::forward_branch_explicit;
use super::{BranchId, IdgCenters};
use crate::conv::{conv2d, KernelBank, Padding};
use crate::error::{Error, Result};
use crate::params::{push, push_mut, ParamMut, ParamRef, Parameterized};
use crate::tensor::{cast_slice, Scalar, Tensor};

/// Uniform fan-in initialization bound for a 3×3 kernel.
fn init_bound(in_channels: usize) -> f64 {
    (1.0 / (in_channels * 9) as f64).sqrt()
}

fn uniform_bank<T: Scalar, R: Rng + ?Sized>(
    out_channels: usize,
    in_channels: usize,
    rng: &mut R,
) -> KernelBank<T> {
    let b = init_bound(in_channels);
    KernelBank::from_fn(out_channels, in_channels, 3, |_| {
        T::from_f64(rng.random_range(-b..b))
    })
}

/// A vanilla 3×3 convolution with bias and zero padding 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainConv<T> {
    pub kernel: KernelBank<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> PlainConv<T> {
    pub fn new(kernel: KernelBank<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != kernel.out_channels() {
            return Err(Error::shape(
                "conv bias",
                &[bias.len()],
                &[kernel.out_channels()],
            ));
        }
        Ok(Self { kernel, bias })
    }

    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: KernelBank::zeros(out_channels, in_channels, 3),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        Self {
            kernel: uniform_bank(out_channels, in_channels, rng),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.kernel, &self.bias, Padding::Zero(1))
    }

    pub fn cast<U: Scalar>(&self) -> PlainConv<U> {
        PlainConv {
            kernel: self.kernel.cast(),
            bias: cast_slice(&self.bias),
        }
    }
}

impl<T: Scalar> Parameterized<T> for PlainConv<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push(out, prefix, "kernel", &self.kernel.shape(), self.kernel.data());
        push(out, prefix, "bias", &[self.bias.len()], &self.bias);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let shape = self.kernel.shape();
        push_mut(out, prefix, "kernel", &shape, self.kernel.data_mut());
        let n = self.bias.len();
        push_mut(out, prefix, "bias", &[n], &mut self.bias);
    }
}

/// A single kernel bank equivalent to a whole multi-branch layer. Only
/// [`fuse`] (and checkpoint loading) produce one.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedKernel<T> {
    conv: PlainConv<T>,
}

impl<T: Scalar> FusedKernel<T> {
    pub(crate) fn from_plain(conv: PlainConv<T>) -> Self {
        Self { conv }
    }

    pub fn conv(&self) -> &PlainConv<T> {
        &self.conv
    }

    pub fn kernel(&self) -> &KernelBank<T> {
        &self.conv.kernel
    }

    pub fn bias(&self) -> &[T] {
        &self.conv.bias
    }

    pub fn is_fused(&self) -> bool {
        true
    }

    pub fn cast<U: Scalar>(&self) -> FusedKernel<U> {
        FusedKernel {
            conv: self.conv.cast(),
        }
    }
}

impl<T: Scalar> Parameterized<T> for FusedKernel<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.conv.collect_params(prefix, out)
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.conv.collect_params_mut(prefix, out)
    }
}

/// One branch on its own (used inside the interaction block), evaluated
/// from its explicit definition.
#[derive(Clone, Debug, PartialEq)]
pub struct SingleBranchConv<T> {
    pub branch: BranchId,
    pub kernel: KernelBank<T>,
    pub centers: Option<IdgCenters>,
    pub bias: Vec<T>,
}

impl<T: Scalar> SingleBranchConv<T> {
    pub fn new(
        branch: BranchId,
        kernel: KernelBank<T>,
        centers: Option<IdgCenters>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if kernel.size() != 3 {
            return Err(Error::InvalidArgument("branch kernels must be 3x3".into()));
        }
        if bias.len() != kernel.out_channels() {
            return Err(Error::shape(
                "branch bias",
                &[bias.len()],
                &[kernel.out_channels()],
            ));
        }
        match (&centers, branch) {
            (Some(c), BranchId::Idg) => c.check_len(kernel.slices())?,
            (None, BranchId::Idg) => {
                return Err(Error::InvalidArgument("idg branch needs centers".into()))
            }
            (Some(_), _) => {
                return Err(Error::InvalidArgument(format!(
                    "{branch} branch takes no centers"
                )))
            }
            (None, _) => {}
        }
        Ok(Self {
            branch,
            kernel,
            centers,
            bias,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        branch: BranchId,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = uniform_bank(out_channels, in_channels, rng);
        let centers = (branch == BranchId::Idg)
            .then(|| IdgCenters::random(out_channels * in_channels, rng));
        Self {
            branch,
            kernel,
            centers,
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn zeros(branch: BranchId, in_channels: usize, out_channels: usize) -> Self {
        Self {
            branch,
            kernel: KernelBank::zeros(out_channels, in_channels, 3),
            centers: (branch == BranchId::Idg)
                .then(|| IdgCenters::uniform(out_channels * in_channels, 1).expect("valid")),
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = forward_branch_explicit(
            self.branch,
            x,
            &self.kernel,
            self.centers.as_ref(),
            Padding::Zero(1),
        )?;
        add_bias(&mut y, &self.bias);
        Ok(y)
    }

    pub fn fuse(&self) -> Result<FusedKernel<T>> {
        let kernel = self
            .branch
            .transform_bank(&self.kernel, self.centers.as_ref())?;
        Ok(FusedKernel::from_plain(PlainConv {
            kernel,
            bias: self.bias.clone(),
        }))
    }

    /// Gradient with respect to this layer, given the gradient with respect
    /// to its fused kernel.
    pub fn pullback(&self, grad: &PlainConv<T>) -> Result<Self> {
        Ok(Self {
            branch: self.branch,
            kernel: self
                .branch
                .adjoint_bank(&grad.kernel, self.centers.as_ref())?,
            centers: self.centers.clone(),
            bias: grad.bias.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> SingleBranchConv<U> {
        SingleBranchConv {
            branch: self.branch,
            kernel: self.kernel.cast(),
            centers: self.centers.clone(),
            bias: cast_slice(&self.bias),
        }
    }
}

impl<T: Scalar> Parameterized<T> for SingleBranchConv<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push(out, prefix, "kernel", &self.kernel.shape(), self.kernel.data());
        push(out, prefix, "bias", &[self.bias.len()], &self.bias);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let shape = self.kernel.shape();
        push_mut(out, prefix, "kernel", &shape, self.kernel.data_mut());
        let n = self.bias.len();
        push_mut(out, prefix, "bias", &[n], &mut self.bias);
    }
}

pub(crate) fn add_bias<T: Scalar>(y: &mut Tensor<T>, bias: &[T]) {
    let [n, c, _, _] = y.shape();
    for b in 0..n {
        for ch in 0..c {
            let v = bias[ch];
            for s in y.plane_mut(b, ch) {
                *s += v;
            }
        }
    }
}

/// Six branch factors, indexed by [`BranchId`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaVector<T>(pub [T; 6]);

impl<T: Scalar> AlphaVector<T> {
    #[inline]
    pub fn get(&self, b: BranchId) -> T {
        self.0[b.index()]
    }

    pub fn only(b: BranchId, v: T) -> Self {
        let mut a = [T::zero(); 6];
        a[b.index()] = v;
        Self(a)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Affine map from all concatenated branch weights to six factors:
/// `α = W · ω_all + offset`, `W` stored row-major `6 × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead<T> {
    pub weight: Vec<T>,
    pub offset: Vec<T>,
    dim: usize,
}

impl<T: Scalar> FusionHead<T> {
    pub fn new(dim: usize, weight: Vec<T>, offset: Vec<T>) -> Result<Self> {
        if weight.len() != 6 * dim || offset.len() != 6 {
            return Err(Error::shape(
                "fusion head",
                &[weight.len(), offset.len()],
                &[6 * dim, 6],
            ));
        }
        Ok(Self {
            weight,
            offset,
            dim,
        })
    }

    /// Zero weights, offsets `1/6`.
    pub fn averaging(dim: usize) -> Self {
        Self {
            weight: vec![T::zero(); 6 * dim],
            offset: vec![T::from_f64(1.0 / 6.0); 6],
            dim,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            weight: vec![T::zero(); 6 * dim],
            offset: vec![T::zero(); 6],
            dim,
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, b: BranchId) -> &[T] {
        &self.weight[b.index() * self.dim..(b.index() + 1) * self.dim]
    }

    fn cast<U: Scalar>(&self) -> FusionHead<U> {
        FusionHead {
            weight: cast_slice(&self.weight),
            offset: cast_slice(&self.offset),
            dim: self.dim,
        }
    }
}

/// All parameters of one DGConv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DgConvParams<T> {
    kernels: [KernelBank<T>; 6],
    idg_centers: IdgCenters,
    head: FusionHead<T>,
    bias: Vec<T>,
}

impl<T: Scalar> DgConvParams<T> {
    pub fn new(
        kernels: [KernelBank<T>; 6],
        idg_centers: IdgCenters,
        head: FusionHead<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        let shape = kernels[0].shape();
        if shape[2] != 3 || shape[3] != 3 {
            return Err(Error::InvalidArgument("DGConv kernels must be 3x3".into()));
        }
        for k in &kernels[1..] {
            if k.shape() != shape {
                return Err(Error::shape("DGConv branch kernels", &shape, &k.shape()));
            }
        }
        idg_centers.check_len(shape[0] * shape[1])?;
        let dim = 6 * shape[0] * shape[1] * 9;
        if head.dim() != dim {
            return Err(Error::shape("fusion head input", &[head.dim()], &[dim]));
        }
        if bias.len() != shape[0] {
            return Err(Error::shape("DGConv bias", &[bias.len()], &[shape[0]]));
        }
        Ok(Self {
            kernels,
            idg_centers,
            head,
            bias,
        })
    }

    /// Fan-in uniform branch kernels, random IDG centers, averaging head,
    /// zero bias.
    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let kernels = std::array::from_fn(|_| uniform_bank(out_channels, in_channels, rng));
        let idg_centers = IdgCenters::random(out_channels * in_channels, rng);
        Self {
            kernels,
            idg_centers,
            head: FusionHead::averaging(6 * out_channels * in_channels * 9),
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Everything zero, including the head offsets; centers all 1.
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernels: std::array::from_fn(|_| KernelBank::zeros(out_channels, in_channels, 3)),
            idg_centers: IdgCenters::uniform(out_channels * in_channels, 1).expect("valid"),
            head: FusionHead::zeros(6 * out_channels * in_channels * 9),
            bias: vec![T::zero(); out_channels],
        }
    }

    #[inline]
    pub fn in_channels(&self) -> usize {
        self.kernels[0].in_channels()
    }

    #[inline]
    pub fn out_channels(&self) -> usize {
        self.kernels[0].out_channels()
    }

    pub fn kernel(&self, b: BranchId) -> &KernelBank<T> {
        &self.kernels[b.index()]
    }

    pub fn kernel_mut(&mut self, b: BranchId) -> &mut KernelBank<T> {
        &mut self.kernels[b.index()]
    }

    pub fn idg_centers(&self) -> &IdgCenters {
        &self.idg_centers
    }

    pub fn set_idg_centers(&mut self, c: IdgCenters) -> Result<()> {
        c.check_len(self.idg_centers.len())?;
        self.idg_centers = c;
        Ok(())
    }

    pub(crate) fn idg_centers_mut(&mut self) -> &mut IdgCenters {
        &mut self.idg_centers
    }

    pub fn head(&self) -> &FusionHead<T> {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut FusionHead<T> {
        &mut self.head
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    /// The flattened concatenation of all branch weights, in branch order.
    pub fn weights_all(&self) -> impl Iterator<Item = T> + '_ {
        self.kernels.iter().flat_map(|k| k.data().iter().copied())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        forward_branched(x, self)
    }

    /// Gradient with respect to every parameter, given the gradient with
    /// respect to the fused kernel.
    ///
    /// The factors depend on the branch weights, so each branch kernel
    /// receives two contributions: `α_b · Tᵀ(g)` through its own branch and
    /// `Σ_b dα_b · W_b` through the head.
    pub fn pullback(&self, grad: &PlainConv<T>) -> Result<Self> {
        let alphas = compute_alphas(self)?;
        let mut kernels: [KernelBank<T>; 6] =
            std::array::from_fn(|i| KernelBank::zeros(self.kernels[i].out_channels(), self.kernels[i].in_channels(), 3));
        let mut d_alpha = [T::zero(); 6];
        for b in BranchId::ALL {
            let i = b.index();
            let centers = Some(&self.idg_centers);
            let transformed = b.transform_bank(&self.kernels[i], centers)?;
            d_alpha[i] = dot(transformed.data(), grad.kernel.data());
            let adj = b.adjoint_bank(&grad.kernel, centers)?;
            kernels[i] = adj.scale(alphas.0[i]);
        }

        let dim = self.head.dim();
        let mut head = FusionHead::zeros(dim);
        head.offset.copy_from_slice(&d_alpha);
        let w_all: Vec<T> = self.weights_all().collect();
        for b in BranchId::ALL {
            let i = b.index();
            let da = d_alpha[i];
            for (dst, &w) in head.weight[i * dim..(i + 1) * dim].iter_mut().zip(&w_all) {
                *dst = da * w;
            }
        }
        // Σ_b dα_b · W_b, scattered back onto the per-branch banks.
        let per_bank = self.kernels[0].data().len();
        for b in BranchId::ALL {
            let da = d_alpha[b.index()];
            if da == T::zero() {
                continue;
            }
            let row = self.head.row(b);
            for (bank_idx, bank) in kernels.iter_mut().enumerate() {
                let seg = &row[bank_idx * per_bank..(bank_idx + 1) * per_bank];
                for (g, &w) in bank.data_mut().iter_mut().zip(seg) {
                    *g += da * w;
                }
            }
        }

        Ok(Self {
            kernels,
            idg_centers: self.idg_centers.clone(),
            head,
            bias: grad.bias.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> DgConvParams<U> {
        DgConvParams {
            kernels: std::array::from_fn(|i| self.kernels[i].cast()),
            idg_centers: self.idg_centers.clone(),
            head: self.head.cast(),
            bias: cast_slice(&self.bias),
        }
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

impl<T: Scalar> Parameterized<T> for DgConvParams<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for b in BranchId::ALL {
            let k = &self.kernels[b.index()];
            push(out, prefix, &format!("kernel.{b}"), &k.shape(), k.data());
        }
        push(
            out,
            prefix,
            "head.weight",
            &[6, self.head.dim],
            &self.head.weight,
        );
        push(out, prefix, "head.offset", &[6], &self.head.offset);
        push(out, prefix, "bias", &[self.bias.len()], &self.bias);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (b, k) in BranchId::ALL.iter().zip(self.kernels.iter_mut()) {
            let shape = k.shape();
            push_mut(out, prefix, &format!("kernel.{b}"), &shape, k.data_mut());
        }
        let dim = self.head.dim;
        push_mut(out, prefix, "head.weight", &[6, dim], &mut self.head.weight);
        push_mut(out, prefix, "head.offset", &[6], &mut self.head.offset);
        let n = self.bias.len();
        push_mut(out, prefix, "bias", &[n], &mut self.bias);
    }
}

/// `α = W · ω_all + offset`.
pub fn compute_alphas<T: Scalar>(params: &DgConvParams<T>) -> Result<AlphaVector<T>> {
    let dim = params.head.dim();
    let expected = 6 * params.out_channels() * params.in_channels() * 9;
    if dim != expected {
        return Err(Error::shape("compute_alphas", &[dim], &[expected]));
    }
    let mut alphas = [T::zero(); 6];
    for b in BranchId::ALL {
        let row = params.head.row(b);
        let mut acc = T::zero();
        for (w, x) in row.iter().zip(params.weights_all()) {
            acc += *w * x;
        }
        alphas[b.index()] = acc + params.head.offset[b.index()];
    }
    Ok(AlphaVector(alphas))
}

/// `Σ_b α_b · F_b(X) + bias`, each branch evaluated from its explicit form.
pub fn forward_branched<T: Scalar>(x: &Tensor<T>, params: &DgConvParams<T>) -> Result<Tensor<T>> {
    let alphas = compute_alphas(params)?;
    forward_branched_with_alphas(x, params, &alphas)
}

/// As [`forward_branched`] but with externally supplied factors.
pub fn forward_branched_with_alphas<T: Scalar>(
    x: &Tensor<T>,
    params: &DgConvParams<T>,
    alphas: &AlphaVector<T>,
) -> Result<Tensor<T>> {
    if x.channels() != params.in_channels() {
        return Err(Error::shape(
            "forward_branched",
            &x.shape(),
            &params.kernels[0].shape(),
        ));
    }
    let mut out: Option<Tensor<T>> = None;
    for b in BranchId::ALL {
        let f = forward_branch_explicit(
            b,
            x,
            params.kernel(b),
            Some(&params.idg_centers),
            Padding::Zero(1),
        )?;
        let a = alphas.get(b);
        match out.as_mut() {
            None => out = Some(f.scale(a)),
            Some(acc) => {
                for (o, v) in acc.data_mut().iter_mut().zip(f.data()) {
                    *o += a * *v;
                }
            }
        }
    }
    let mut out = out.expect("six branches");
    add_bias(&mut out, &params.bias);
    Ok(out)
}

/// Collapse a DGConv layer into one kernel bank:
/// `ω*_f = Σ_b α_b · T_b(ω_b)`, bias copied.
pub fn fuse<T: Scalar>(params: &DgConvParams<T>) -> Result<FusedKernel<T>> {
    let alphas = compute_alphas(params)?;
    let mut kernel = KernelBank::zeros(params.out_channels(), params.in_channels(), 3);
    for b in BranchId::ALL {
        let t = b.transform_bank(params.kernel(b), Some(&params.idg_centers))?;
        kernel.axpy(alphas.get(b), &t);
    }
    Ok(FusedKernel::from_plain(PlainConv {
        kernel,
        bias: params.bias.clone(),
    }))
}

/// One convolution with the fused kernel.
pub fn forward_fused<T: Scalar>(x: &Tensor<T>, fused: &FusedKernel<T>) -> Result<Tensor<T>> {
    fused.conv.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> DgConvParams<f64> {
        let mut p = DgConvParams::init(cin, cout, rng);
        let dim = p.head().dim();
        let scale = 1.0 / dim as f64;
        for w in p.head_mut().weight.iter_mut() {
            *w = rng.random_range(-1.0..1.0) * scale * 20.0;
        }
        for o in p.head_mut().offset.iter_mut() {
            *o = rng.random_range(-1.0..1.0);
        }
        for b in p.bias_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        p
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let k = |o, i| KernelBank::<f64>::zeros(o, i, 3);
        let kernels = [k(2, 1), k(2, 1), k(2, 1), k(2, 1), k(2, 1), k(2, 2)];
        let c = IdgCenters::uniform(2, 1).unwrap();
        assert!(DgConvParams::new(kernels, c.clone(), FusionHead::zeros(108), vec![0.0; 2]).is_err());
        let kernels = std::array::from_fn(|_| k(2, 1));
        assert!(DgConvParams::new(kernels, c, FusionHead::zeros(100), vec![0.0; 2]).is_err());
    }

    #[test]
    fn alphas_follow_affine_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p: DgConvParams<f64> = DgConvParams::init(2, 3, &mut rng);
        p.head_mut().offset = vec![1.0; 6];
        assert_eq!(compute_alphas(&p).unwrap().0, [1.0; 6]);

        p.head_mut().offset = vec![0.0; 6];
        let x = rand_tensor(&mut rng, [1, 2, 5, 5]);
        p.bias_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let y = forward_branched(&x, &p).unwrap();
        for c in 0..3 {
            assert!(y.plane(0, c).iter().all(|&v| v == p.bias()[c]));
        }
    }

    #[test]
    fn alphas_match_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 3, 2);
        let a = compute_alphas(&p).unwrap();
        let w_all: Vec<f64> = BranchId::ALL
            .iter()
            .flat_map(|&b| p.kernel(b).data().to_vec())
            .collect();
        for b in BranchId::ALL {
            let mut s = p.head().offset[b.index()];
            for k in 0..w_all.len() {
                s += p.head().weight[b.index() * w_all.len() + k] * w_all[k];
            }
            assert!((a.get(b) - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn vconv_only_identity() {
        let mut p: DgConvParams<f64> = DgConvParams::zeros(1, 1);
        p.kernel_mut(BranchId::Vconv).data_mut()[4] = 1.0;
        p.head_mut().offset[BranchId::Vconv.index()] = 1.0;
        p.bias_mut()[0] = 0.25;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, [2, 1, 4, 5]);
        let y = forward_branched(&x, &p).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| v + 0.25)).unwrap() < 1e-15);
    }

    #[test]
    fn fuse_degenerate_cases() {
        let mut p: DgConvParams<f64> = DgConvParams::zeros(2, 3);
        p.head_mut().offset = vec![1.0; 6];
        p.bias_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        let f = fuse(&p).unwrap();
        assert!(f.kernel().data().iter().all(|&v| v == 0.0));
        assert_eq!(f.bias(), &[1.0, 2.0, 3.0]);
        assert!(f.is_fused());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = random_params(&mut rng, 2, 3);
        p.head_mut().weight.iter_mut().for_each(|w| *w = 0.0);
        p.head_mut().offset = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let f = fuse(&p).unwrap();
        assert_eq!(f.kernel(), p.kernel(BranchId::Vconv));
    }

    #[test]
    fn branched_equals_fused_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let cin = rng.random_range(1..=5);
            let cout = rng.random_range(1..=5);
            let p = random_params(&mut rng, cin, cout);
            let x = rand_tensor(&mut rng, [2, cin, 9, 7]);
            let a = forward_branched(&x, &p).unwrap();
            let b = forward_fused(&x, &fuse(&p).unwrap()).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);

            let p32 = p.cast::<f32>();
            let x32 = x.cast::<f32>();
            let a = forward_branched(&x32, &p32).unwrap();
            let b = forward_fused(&x32, &fuse(&p32).unwrap()).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn branch_scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&mut rng, 3, 2);
        let x = rand_tensor(&mut rng, [1, 3, 6, 6]);
        let alphas = compute_alphas(&p).unwrap();
        let base = forward_branched_with_alphas(&x, &p, &alphas).unwrap();
        let s = 2.5;
        for b in BranchId::ALL {
            let mut q = p.clone();
            *q.kernel_mut(b) = q.kernel(b).scale(s);
            let scaled = forward_branched_with_alphas(&x, &q, &alphas).unwrap();
            // The branch contribution is (out - everything else); isolate it.
            let only = AlphaVector::only(b, alphas.get(b));
            let mut p0 = p.clone();
            p0.bias_mut().iter_mut().for_each(|v| *v = 0.0);
            let contrib = forward_branched_with_alphas(&x, &p0, &only).unwrap();
            let expected = base.add(&contrib.scale(s - 1.0)).unwrap();
            let rel = scaled.max_abs_diff(&expected).unwrap() / expected.max_abs().max(1e-12);
            assert!(rel <= 1e-6, "{b}: {rel}");
        }
    }

    #[test]
    fn fused_parameter_parity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p: DgConvParams<f64> = DgConvParams::init(5, 7, &mut rng);
        let f = fuse(&p).unwrap();
        assert_eq!(f.param_count(), PlainConv::<f64>::zeros(5, 7).param_count());
        assert_eq!(f.param_count(), 7 * 5 * 9 + 7);
    }

    #[test]
    fn fresh_init_matches_recorded_conventions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: DgConvParams<f64> = DgConvParams::init(4, 2, &mut rng);
        assert_eq!(compute_alphas(&p).unwrap().0, [1.0 / 6.0; 6]);
        let bound = (1.0f64 / 36.0).sqrt();
        assert!(p.weights_all().all(|w| w.abs() <= bound));
        assert!(p.bias().iter().all(|&b| b == 0.0));
    }
}
