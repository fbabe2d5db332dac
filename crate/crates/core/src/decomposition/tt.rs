//! Tensor-train cores, plus the three-core layout used for conv kernels.

use crate::error::{Error, Result};
use crate::tensor::{conv2d_raw, ConvKernel, DenseTensor, TensorShape};

use super::{matmul, matmul_nt, matmul_tn, sym_lambda_max};

/// Tensor-train cores. Core `k` is stored row-major with shape
/// `(R_{k-1}, I_k, R_k)`; boundary ranks are 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TtFactors {
    dims: Vec<usize>,
    /// `R_0, ..., R_N` including both boundary ones.
    bonds: Vec<usize>,
    cores: Vec<Vec<f64>>,
}

impl TtFactors {
    /// `ranks` are the internal bond dimensions `(R_1, ..., R_{N-1})`.
    pub fn new(dims: Vec<usize>, ranks: Vec<usize>, cores: Vec<Vec<f64>>) -> Result<Self> {
        TensorShape::new(dims.clone())?;
        if ranks.len() + 1 != dims.len() {
            return Err(Error::InvalidRank(format!(
                "an order-{} train needs {} internal ranks, got {}",
                dims.len(),
                dims.len() - 1,
                ranks.len()
            )));
        }
        if ranks.contains(&0) {
            return Err(Error::InvalidRank("TT ranks must be positive".into()));
        }
        let mut bonds = Vec::with_capacity(dims.len() + 1);
        bonds.push(1);
        bonds.extend_from_slice(&ranks);
        bonds.push(1);
        if cores.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} cores for an order-{} tensor",
                cores.len(),
                dims.len()
            )));
        }
        for (k, core) in cores.iter().enumerate() {
            let expected = bonds[k] * dims[k] * bonds[k + 1];
            if core.len() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "core {k} has {} entries, expected {}x{}x{}",
                    core.len(),
                    bonds[k],
                    dims[k],
                    bonds[k + 1]
                )));
            }
            if core.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("core {k}")));
            }
        }
        Ok(Self { dims, bonds, cores })
    }

    pub fn zeros(dims: Vec<usize>, ranks: Vec<usize>) -> Result<Self> {
        let mut bonds = vec![1];
        bonds.extend_from_slice(&ranks);
        bonds.push(1);
        if bonds.len() != dims.len() + 1 {
            return Err(Error::InvalidRank("rank count does not match tensor order".into()));
        }
        let cores = (0..dims.len()).map(|k| vec![0.0; bonds[k] * dims[k] * bonds[k + 1]]).collect();
        Self::new(dims, ranks, cores)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// Internal ranks `(R_1, ..., R_{N-1})`.
    pub fn ranks(&self) -> &[usize] {
        &self.bonds[1..self.bonds.len() - 1]
    }

    /// Shape `(R_{k-1}, I_k, R_k)` of core `k`.
    pub fn core_shape(&self, k: usize) -> [usize; 3] {
        [self.bonds[k], self.dims[k], self.bonds[k + 1]]
    }

    pub fn core(&self, k: usize) -> &[f64] {
        &self.cores[k]
    }

    pub fn cores(&self) -> &[Vec<f64>] {
        &self.cores
    }

    pub(crate) fn cores_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.cores
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(Vec::len).sum()
    }

    /// `L_k` for k = 0..=N, each of shape `(I_1...I_k, R_k)`.
    fn left_interfaces(&self) -> Vec<Vec<f64>> {
        let mut lefts = Vec::with_capacity(self.order() + 1);
        lefts.push(vec![1.0]);
        let mut rows = 1;
        for k in 0..self.order() {
            let [r0, i, r1] = self.core_shape(k);
            let next = matmul(&lefts[k], rows, r0, &self.cores[k], i * r1);
            rows *= i;
            lefts.push(next);
        }
        lefts
    }

    /// `Q_k` for k = 0..=N, each of shape `(R_k, I_{k+1}...I_N)`.
    fn right_interfaces(&self) -> Vec<Vec<f64>> {
        let n = self.order();
        let mut rights = vec![Vec::new(); n + 1];
        rights[n] = vec![1.0];
        let mut cols = 1;
        for k in (0..n).rev() {
            let [r0, i, r1] = self.core_shape(k);
            rights[k] = matmul(&self.cores[k], r0 * i, r1, &rights[k + 1], cols);
            cols *= i;
        }
        rights
    }

    pub fn reconstruct(&self) -> DenseTensor {
        let data = self.left_interfaces().pop().unwrap();
        DenseTensor::from_parts(TensorShape::new(self.dims.clone()).unwrap(), data)
    }

    /// Contraction of `t` against the Jacobian of every core:
    /// `G_k(a, i, b) = sum L_k(p, a) t(p, i, q) Q_{k+1}(b, q)`.
    pub fn contract_residual(&self, t: &DenseTensor) -> Vec<Vec<f64>> {
        assert_eq!(t.dims(), &self.dims[..], "contract_residual: shape mismatch");
        let lefts = self.left_interfaces();
        let rights = self.right_interfaces();
        let total = t.numel();
        let mut p = 1;
        (0..self.order())
            .map(|k| {
                let [r0, i, r1] = self.core_shape(k);
                let q = total / (p * i);
                let lt = matmul_tn(&lefts[k], p, r0, t.data(), i * q);
                let g = matmul_nt(&lt, r0 * i, q, &rights[k + 1], r1);
                p *= i;
                g
            })
            .collect()
    }

    /// Largest eigenvalue of `J_k^T J_k` per core, which factorizes into
    /// the spectra of the two interface Gram matrices.
    pub(crate) fn block_curvatures(&self, warm: &mut Vec<Vec<f64>>) -> Vec<f64> {
        let lefts = self.left_interfaces();
        let rights = self.right_interfaces();
        let n = self.order();
        warm.resize_with(2 * n, Vec::new);
        let total: usize = self.dims.iter().product();
        let mut p = 1;
        (0..n)
            .map(|k| {
                let [r0, i, r1] = self.core_shape(k);
                let q = total / (p * i);
                let gl = matmul_tn(&lefts[k], p, r0, &lefts[k], r0);
                let gr = matmul_nt(&rights[k + 1], r1, q, &rights[k + 1], r1);
                p *= i;
                if warm[2 * k].len() != r0 {
                    warm[2 * k] = vec![1.0; r0];
                }
                if warm[2 * k + 1].len() != r1 {
                    warm[2 * k + 1] = vec![1.0; r1];
                }
                let (wl, wr) = warm.split_at_mut(2 * k + 1);
                sym_lambda_max(&gl, r0, &mut wl[2 * k]) * sym_lambda_max(&gr, r1, &mut wr[0])
            })
            .collect()
    }
}

/// Plain chain contraction of the cores.
pub fn tt_reconstruct(f: &TtFactors) -> DenseTensor {
    f.reconstruct()
}

/// Three-core train of a conv kernel: the kernel `(O, C, k1, k2)` is viewed
/// as `(O, k1*k2, C)` so the cores are `(O, R1)`, `(R1, k1, k2, R2)` and
/// `(C, R2)` up to storage order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTt {
    train: TtFactors,
    k1: usize,
    k2: usize,
}

impl ConvTt {
    pub fn from_train(train: TtFactors, k1: usize, k2: usize) -> Result<Self> {
        if train.order() != 3 || train.dims()[1] != k1 * k2 {
            return Err(Error::ShapeMismatch(format!(
                "conv TT needs cores over (O, {k1}*{k2}, C), got {:?}",
                train.dims()
            )));
        }
        Ok(Self { train, k1, k2 })
    }

    /// Builds the train from the three conv-facing cores: `out_core` is
    /// `(O, R1)`, `spatial` is `(R1, k1, k2, R2)`, `in_core` is `(C, R2)`.
    pub fn from_cores(
        out_core: &DenseTensor,
        spatial: &DenseTensor,
        in_core: &DenseTensor,
    ) -> Result<Self> {
        let (&[o, r1], &[r1b, k1, k2, r2], &[c, r2b]) =
            (out_core.dims(), spatial.dims(), in_core.dims())
        else {
            return Err(Error::ShapeMismatch("conv TT cores must be (O,R1), (R1,k1,k2,R2), (C,R2)".into()));
        };
        if r1 != r1b || r2 != r2b {
            return Err(Error::ShapeMismatch(format!(
                "rank mismatch between cores: {r1} vs {r1b}, {r2} vs {r2b}"
            )));
        }
        let last = in_core.permute(&[1, 0])?.into_data();
        let train = TtFactors::new(
            vec![o, k1 * k2, c],
            vec![r1, r2],
            vec![out_core.data().to_vec(), spatial.data().to_vec(), last],
        )?;
        Self::from_train(train, k1, k2)
    }

    pub fn train(&self) -> &TtFactors {
        &self.train
    }

    pub fn ranks(&self) -> (usize, usize) {
        (self.train.ranks()[0], self.train.ranks()[1])
    }

    /// Kernel extents `(O, C, k1, k2)`.
    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.train.dims()[0], self.train.dims()[2], self.k1, self.k2]
    }

    pub fn out_core(&self) -> DenseTensor {
        let (r1, _) = self.ranks();
        DenseTensor::from_parts(
            TensorShape::new(vec![self.train.dims()[0], r1]).unwrap(),
            self.train.core(0).to_vec(),
        )
    }

    pub fn spatial_core(&self) -> DenseTensor {
        let (r1, r2) = self.ranks();
        DenseTensor::from_parts(
            TensorShape::new(vec![r1, self.k1, self.k2, r2]).unwrap(),
            self.train.core(1).to_vec(),
        )
    }

    pub fn in_core(&self) -> DenseTensor {
        let (_, r2) = self.ranks();
        let stored = DenseTensor::from_parts(
            TensorShape::new(vec![r2, self.train.dims()[2]]).unwrap(),
            self.train.core(2).to_vec(),
        );
        stored.permute(&[1, 0]).unwrap()
    }

    pub fn reconstruct_kernel(&self) -> ConvKernel {
        kernel_from_tt_view(&self.train.reconstruct(), self.k1, self.k2).unwrap()
    }
}

/// `(O, C, k1, k2)` -> `(O, k1*k2, C)`.
pub fn tt_kernel_view(kernel: &ConvKernel) -> DenseTensor {
    let [o, c, k1, k2] = [
        kernel.out_channels(),
        kernel.in_channels(),
        kernel.kernel_size().0,
        kernel.kernel_size().1,
    ];
    kernel
        .tensor()
        .permute(&[0, 2, 3, 1])
        .and_then(|t| t.reshape(vec![o, k1 * k2, c]))
        .expect("kernel view of a valid kernel")
}

/// Inverse of [`tt_kernel_view`].
pub fn kernel_from_tt_view(view: &DenseTensor, k1: usize, k2: usize) -> Result<ConvKernel> {
    let &[o, s, c] = view.dims() else {
        return Err(Error::ShapeMismatch("TT kernel view must be 3-way".into()));
    };
    if s != k1 * k2 {
        return Err(Error::ShapeMismatch(format!("middle extent {s} is not {k1}x{k2}")));
    }
    ConvKernel::new(view.reshape(vec![o, k1, k2, c])?.permute(&[0, 3, 1, 2])?)
}

/// Factored forward pass: pointwise `C -> R2`, spatial `k1 x k2` pass
/// `R2 -> R1`, pointwise `R1 -> O`.
pub fn tt_conv_forward(
    f: &ConvTt,
    input: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let [o, c, _, _] = f.kernel_dims();
    let (r1, r2) = f.ranks();
    let &[c_in, h, w] = input.dims() else {
        return Err(Error::ShapeMismatch(format!("input must be (C, H, W), got {:?}", input.dims())));
    };
    if c_in != c {
        return Err(Error::ShapeMismatch(format!("input has {c_in} channels, kernel expects {c}")));
    }
    // Stage 1: (R2, C) x (C, H*W).
    let z1 = matmul(f.train.core(2), r2, c, input.data(), h * w);
    let z1 = DenseTensor::new(vec![r2, h, w], z1)?;
    // Stage 2: spatial kernel (R1, R2, k1, k2) from the stored (R1, k1, k2, R2) core.
    let spatial = f.spatial_core().permute(&[0, 3, 1, 2])?;
    let z2 = conv2d_raw(&spatial, &z1, stride, padding)?;
    let (ho, wo) = (z2.dims()[1], z2.dims()[2]);
    // Stage 3: (O, R1) x (R1, H'*W').
    let out = matmul(f.train.core(0), o, r1, z2.data(), ho * wo);
    DenseTensor::new(vec![o, ho, wo], out)
}
