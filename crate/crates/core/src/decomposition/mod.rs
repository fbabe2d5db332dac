//! CP and tensor-train factorizations fitted by full-batch gradient descent.

pub mod cp;
pub mod init;
pub mod tt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, DenseTensor};

pub use cp::{als_oracle_cp, cp_conv_forward, cp_reconstruct, AlsResult, CpFactors};
pub use tt::{kernel_from_tt_view, tt_conv_forward, tt_kernel_view, tt_reconstruct, ConvTt, TtFactors};

/// Which factorization a layer is compressed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecompKind {
    Cp,
    Tt,
}

impl DecompKind {
    /// Decomposition target for a conv kernel: the kernel itself for CP,
    /// the `(O, k1*k2, C)` view for TT.
    pub fn target(self, kernel: &ConvKernel) -> DenseTensor {
        match self {
            DecompKind::Cp => kernel.tensor().clone(),
            DecompKind::Tt => tt_kernel_view(kernel),
        }
    }

    /// Rank spec for a single search rank. TT uses the same value for
    /// every internal bond.
    pub fn rank_spec(self, rank: usize, order: usize) -> RankSpec {
        match self {
            DecompKind::Cp => RankSpec::Cp(rank),
            DecompKind::Tt => RankSpec::Tt(vec![rank; order.saturating_sub(1)]),
        }
    }

    /// Largest admissible single search rank for a target of these extents.
    pub fn rank_cap(self, dims: &[usize]) -> usize {
        match self {
            DecompKind::Cp => cp_rank_cap(dims),
            DecompKind::Tt => tt_bond_caps(dims).into_iter().min().unwrap_or(1),
        }
    }
}

impl std::fmt::Display for DecompKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecompKind::Cp => "cp",
            DecompKind::Tt => "tt",
        })
    }
}

impl std::str::FromStr for DecompKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp" => Ok(DecompKind::Cp),
            "tt" => Ok(DecompKind::Tt),
            other => Err(Error::InvalidConfig(format!("unknown decomposition '{other}'"))),
        }
    }
}

/// Rank of a factorization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankSpec {
    Cp(usize),
    /// Internal bond dimensions `(R_1, ..., R_{N-1})`.
    Tt(Vec<usize>),
}

/// Product of all extents except the largest one.
pub fn cp_rank_cap(dims: &[usize]) -> usize {
    let numel: usize = dims.iter().product();
    numel / dims.iter().copied().max().unwrap_or(1)
}

/// Per-bond caps `min(prod left extents, prod right extents)`.
pub fn tt_bond_caps(dims: &[usize]) -> Vec<usize> {
    let numel: usize = dims.iter().product();
    let mut left = 1;
    dims[..dims.len().saturating_sub(1)]
        .iter()
        .map(|&d| {
            left *= d;
            left.min(numel / left)
        })
        .collect()
}

impl RankSpec {
    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        match self {
            RankSpec::Cp(r) => {
                let cap = cp_rank_cap(dims);
                if *r == 0 || *r > cap {
                    return Err(Error::InvalidRank(format!(
                        "CP rank {r} outside [1, {cap}] for {dims:?}"
                    )));
                }
            }
            RankSpec::Tt(ranks) => {
                let caps = tt_bond_caps(dims);
                if ranks.len() != caps.len() {
                    return Err(Error::InvalidRank(format!(
                        "{} TT ranks for an order-{} tensor",
                        ranks.len(),
                        dims.len()
                    )));
                }
                for (k, (&r, &cap)) in ranks.iter().zip(&caps).enumerate() {
                    if r == 0 || r > cap {
                        return Err(Error::InvalidRank(format!(
                            "TT rank R_{} = {r} outside [1, {cap}] for {dims:?}",
                            k + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A fitted factorization of some dense target.
#[derive(Debug, Clone, PartialEq)]
pub enum Factors {
    Cp(CpFactors),
    Tt(TtFactors),
}

impl Factors {
    pub fn reconstruct(&self) -> DenseTensor {
        match self {
            Factors::Cp(f) => f.reconstruct(),
            Factors::Tt(f) => f.reconstruct(),
        }
    }

    pub fn rank_spec(&self) -> RankSpec {
        match self {
            Factors::Cp(f) => RankSpec::Cp(f.rank()),
            Factors::Tt(f) => RankSpec::Tt(f.ranks().to_vec()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Factors::Cp(f) => f.param_count(),
            Factors::Tt(f) => f.param_count(),
        }
    }

    /// `J^T t` for every parameter block, `J` the reconstruction Jacobian.
    /// The gradient of `||recon - W||^2` is twice this with `t = recon - W`.
    pub fn contract_residual(&self, t: &DenseTensor) -> Vec<Vec<f64>> {
        match self {
            Factors::Cp(f) => f.mttkrp(t),
            Factors::Tt(f) => f.contract_residual(t),
        }
    }

    /// Parameter blocks in a fixed order (CP factors, TT cores).
    pub fn blocks(&self) -> &[Vec<f64>] {
        match self {
            Factors::Cp(f) => f.factors(),
            Factors::Tt(f) => f.cores(),
        }
    }

    pub(crate) fn blocks_mut(&mut self) -> &mut [Vec<f64>] {
        match self {
            Factors::Cp(f) => f.factors_mut(),
            Factors::Tt(f) => f.cores_mut(),
        }
    }

    /// Per-block curvature bounds. CP blocks carry one value per column,
    /// TT cores a single value.
    pub(crate) fn block_curvatures(&self, warm: &mut Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        match self {
            Factors::Cp(f) => {
                let _ = warm;
                f.column_curvatures(None)
            }
            Factors::Tt(f) => f.block_curvatures(warm).into_iter().map(|c| vec![c]).collect(),
        }
    }
}

/// Hyperparameters of a single-rank gradient fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecomposeConfig {
    /// Step as a fraction of the inverse block curvature.
    pub learning_rate: f64,
    pub iterations: usize,
    /// Nesterov momentum.
    pub momentum: f64,
    pub seed: u64,
    pub init_scale: f64,
    /// Cosine annealing of the step over `iterations`.
    pub cosine: bool,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            iterations: 1000,
            momentum: 0.9,
            seed: 0,
            init_scale: 1.0,
            cosine: true,
        }
    }
}

impl DecomposeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidConfig("init scale must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine-annealed step for iteration `t` of `total` (minimum 0).
pub fn annealed(base: f64, t: usize, total: usize, cosine: bool) -> f64 {
    if !cosine || total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}

/// Nesterov momentum over curvature-normalized block gradients.
#[derive(Debug, Clone, Default)]
pub(crate) struct DescentState {
    velocity: Vec<Vec<f64>>,
    warm: Vec<Vec<f64>>,
}

/// Largest update of a column relative to its current norm.
const TRUST_RATIO: f64 = 0.5;

impl DescentState {
    /// One step on `f` given raw gradients `grads` (one per block).
    ///
    /// Gradients are divided by twice a per-column curvature bound, so a
    /// learning rate of 1 is a full block least-squares step when the other
    /// blocks are held fixed. Column updates longer than `TRUST_RATIO`
    /// times the column norm are shrunk together with their velocity.
    pub(crate) fn step(&mut self, f: &mut Factors, grads: &[Vec<f64>], lr: f64, momentum: f64) {
        let curv = f.block_curvatures(&mut self.warm);
        self.apply(f.blocks_mut(), grads, &curv, lr, momentum);
    }

    /// Applies one step with caller-supplied curvature bounds. Block `b`
    /// has `curv[b].len()` interleaved columns (entry `k` belongs to column
    /// `k % len`).
    pub(crate) fn apply(
        &mut self,
        blocks: &mut [Vec<f64>],
        grads: &[Vec<f64>],
        curv: &[Vec<f64>],
        lr: f64,
        momentum: f64,
    ) {
        self.velocity.resize_with(blocks.len(), Vec::new);
        let mut delta = Vec::new();
        for ((block, g), (vel, c)) in blocks.iter_mut().zip(grads).zip(self.velocity.iter_mut().zip(curv)) {
            if vel.len() != block.len() {
                *vel = vec![0.0; block.len()];
            }
            let cols = c.len();
            let inv: Vec<f64> = c
                .iter()
                .map(|&ci| if ci > 0.0 && ci.is_finite() { 0.5 / ci } else { 0.0 })
                .collect();
            delta.clear();
            for (k, (&gi, v)) in g.iter().zip(vel.iter_mut()).enumerate() {
                let u = gi * inv[k % cols];
                *v = momentum * *v + u;
                delta.push(lr * (u + momentum * *v));
            }
            let mut step_sq = vec![0.0; cols];
            let mut norm_sq = vec![0.0; cols];
            for (k, (d, p)) in delta.iter().zip(block.iter()).enumerate() {
                step_sq[k % cols] += d * d;
                norm_sq[k % cols] += p * p;
            }
            let shrink: Vec<f64> = step_sq
                .iter()
                .zip(&norm_sq)
                .map(|(&s, &n)| {
                    let limit = TRUST_RATIO * n.sqrt();
                    let s = s.sqrt();
                    if s > limit { limit / s } else { 1.0 }
                })
                .collect();
            for (k, ((p, d), v)) in block.iter_mut().zip(&delta).zip(vel.iter_mut()).enumerate() {
                let sh = shrink[k % cols];
                *p -= d * sh;
                *v *= sh;
            }
        }
    }

    pub(crate) fn warm_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.warm
    }
}

/// Outcome of [`decompose_sgd`].
#[derive(Debug, Clone)]
pub struct DecomposeOutcome {
    pub factors: Factors,
    /// `||W - recon||^2` at the start of every iteration.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
}

/// Fits factors of the given rank to `w` by minimizing
/// `||w - reconstruct(factors)||_F^2` with full-batch Nesterov descent.
pub fn decompose_sgd(w: &DenseTensor, rank: &RankSpec, cfg: &DecomposeConfig) -> Result<DecomposeOutcome> {
    cfg.validate()?;
    rank.validate(w.dims())?;
    let mut factors = init::initial_factors(w, rank, cfg.init_scale, cfg.seed)?;
    let mut state = DescentState::default();
    let mut losses = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let residual = factors.reconstruct().sub(w)?;
        let loss = residual.frobenius_norm_sq();
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: t, loss });
        }
        losses.push(loss);
        let mut grads = factors.contract_residual(&residual);
        scale_blocks(&mut grads, 2.0);
        let lr = annealed(cfg.learning_rate, t, cfg.iterations, cfg.cosine);
        state.step(&mut factors, &grads, lr, cfg.momentum);
    }
    let final_loss = factors.reconstruct().sub(w)?.frobenius_norm_sq();
    if !final_loss.is_finite() {
        return Err(Error::Diverged { iteration: cfg.iterations, loss: final_loss });
    }
    Ok(DecomposeOutcome { factors, losses, final_loss })
}

pub(crate) fn scale_blocks(blocks: &mut [Vec<f64>], factor: f64) {
    blocks.iter_mut().flatten().for_each(|g| *g *= factor);
}

/// Factors of a conv kernel in its deployable layout.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelFactors {
    /// CP over `(O, C, k1, k2)`.
    Cp(CpFactors),
    Tt(ConvTt),
}

impl KernelFactors {
    /// Wraps factors fitted against [`DecompKind::target`].
    pub fn from_target_factors(factors: Factors, kernel_dims: [usize; 4]) -> Result<Self> {
        match factors {
            Factors::Cp(f) => {
                if f.dims() != kernel_dims {
                    return Err(Error::ShapeMismatch(format!(
                        "CP factors over {:?} do not match kernel {kernel_dims:?}",
                        f.dims()
                    )));
                }
                Ok(KernelFactors::Cp(f))
            }
            Factors::Tt(f) => Ok(KernelFactors::Tt(ConvTt::from_train(f, kernel_dims[2], kernel_dims[3])?)),
        }
    }

    pub fn kind(&self) -> DecompKind {
        match self {
            KernelFactors::Cp(_) => DecompKind::Cp,
            KernelFactors::Tt(_) => DecompKind::Tt,
        }
    }

    /// `(O, C, k1, k2)`.
    pub fn kernel_dims(&self) -> [usize; 4] {
        match self {
            KernelFactors::Cp(f) => [f.dims()[0], f.dims()[1], f.dims()[2], f.dims()[3]],
            KernelFactors::Tt(f) => f.kernel_dims(),
        }
    }

    /// `(R, R)` for CP so both kinds report two numbers.
    pub fn ranks(&self) -> (usize, usize) {
        match self {
            KernelFactors::Cp(f) => (f.rank(), f.rank()),
            KernelFactors::Tt(f) => f.ranks(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            KernelFactors::Cp(f) => f.param_count(),
            KernelFactors::Tt(f) => f.train().param_count(),
        }
    }

    pub fn reconstruct_kernel(&self) -> ConvKernel {
        match self {
            KernelFactors::Cp(f) => ConvKernel::new(f.reconstruct()).expect("4-way CP factors"),
            KernelFactors::Tt(f) => f.reconstruct_kernel(),
        }
    }

    /// Factored forward pass.
    pub fn forward(&self, input: &DenseTensor, stride: usize, padding: usize) -> Result<DenseTensor> {
        match self {
            KernelFactors::Cp(f) => cp_conv_forward(f, input, stride, padding),
            KernelFactors::Tt(f) => tt_conv_forward(f, input, stride, padding),
        }
    }
}

/// Row-major `(m x k) * (k x n)`.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            row.iter_mut().zip(&b[l * n..(l + 1) * n]).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

/// `a^T * b` with `a: (p x m)`, `b: (p x n)`.
pub(crate) fn matmul_tn(a: &[f64], p: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    let mut out = vec![0.0; m * n];
    for l in 0..p {
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in a[l * m..(l + 1) * m].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            out[i * n..(i + 1) * n].iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
    out
}

/// `a * b^T` with `a: (m x k)`, `b: (n x k)`.
pub(crate) fn matmul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = arow.iter().zip(&b[j * k..(j + 1) * k]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

const POWER_STEPS: usize = 4;

/// Largest eigenvalue of a symmetric PSD `n x n` matrix by warm-started
/// power iteration. `v` carries the eigenvector estimate between calls.
pub(crate) fn sym_lambda_max(m: &[f64], n: usize, v: &mut Vec<f64>) -> f64 {
    debug_assert_eq!(m.len(), n * n);
    if n == 1 {
        return m[0].max(0.0);
    }
    let trace_mean = (0..n).map(|i| m[i * n + i]).sum::<f64>() / n as f64;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) || v.iter().all(|&x| x == 0.0) {
        *v = vec![1.0; n];
    }
    let mut w = vec![0.0; n];
    let mut est = 0.0;
    for _ in 0..POWER_STEPS {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for i in 0..n {
            w[i] = m[i * n..(i + 1) * n].iter().zip(v.iter()).map(|(a, b)| a * b).sum::<f64>() / norm;
        }
        est = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if est == 0.0 {
            break;
        }
        std::mem::swap(v, &mut w);
    }
    est.max(trace_mean)
}
