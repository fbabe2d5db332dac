//! Canonical polyadic (Kruskal) factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_size, DenseTensor, TensorShape};

/// Kruskal factors `[[V_1, ..., V_N]]`. Factor `n` is stored row-major with
/// shape `(I_n, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactors {
    dims: Vec<usize>,
    rank: usize,
    factors: Vec<Vec<f64>>,
}

impl CpFactors {
    pub fn new(dims: Vec<usize>, rank: usize, factors: Vec<Vec<f64>>) -> Result<Self> {
        TensorShape::new(dims.clone())?;
        if rank == 0 {
            return Err(Error::InvalidRank("CP rank must be positive".into()));
        }
        if factors.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} factor matrices for an order-{} tensor",
                factors.len(),
                dims.len()
            )));
        }
        for (n, (f, &d)) in factors.iter().zip(&dims).enumerate() {
            if f.len() != d * rank {
                return Err(Error::ShapeMismatch(format!(
                    "factor {n} has {} entries, expected {d}x{rank}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("factor {n}")));
            }
        }
        Ok(Self { dims, rank, factors })
    }

    pub fn zeros(dims: Vec<usize>, rank: usize) -> Result<Self> {
        let factors = dims.iter().map(|&d| vec![0.0; d * rank]).collect();
        Self::new(dims, rank, factors)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    /// Factor `n` as a row-major `(I_n, R)` slice.
    pub fn factor(&self, n: usize) -> &[f64] {
        &self.factors[n]
    }

    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    pub(crate) fn factors_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.factors
    }

    pub fn param_count(&self) -> usize {
        self.rank * self.dims.iter().sum::<usize>()
    }

    pub fn reconstruct(&self) -> DenseTensor {
        let mut out = vec![0.0; self.dims.iter().product()];
        self.sweep(Sweep::Reconstruct(&mut out));
        DenseTensor::from_parts(TensorShape::new(self.dims.clone()).unwrap(), out)
    }

    /// Contracts `t` against every mode's Khatri-Rao complement:
    /// `G_n(i, r) = sum_{other indices} t(..i..) prod_{m != n} V_m(i_m, r)`.
    ///
    /// The gradient of `||W - [[V]]||^2` with respect to `V_n` is
    /// `2 * mttkrp(recon - W)[n]`.
    pub fn mttkrp(&self, t: &DenseTensor) -> Vec<Vec<f64>> {
        assert_eq!(t.dims(), &self.dims[..], "mttkrp: shape mismatch");
        let mut grads: Vec<Vec<f64>> = self.dims.iter().map(|&d| vec![0.0; d * self.rank]).collect();
        self.sweep(Sweep::Mttkrp { t: t.data(), grads: &mut grads });
        grads
    }

    /// Gram matrix `V_n^T V_n` as a row-major `R x R` array.
    fn gram(&self, n: usize) -> Vec<f64> {
        let r = self.rank;
        let f = &self.factors[n];
        let mut g = vec![0.0; r * r];
        for row in f.chunks_exact(r) {
            for a in 0..r {
                let va = row[a];
                if va == 0.0 {
                    continue;
                }
                for b in a..r {
                    g[a * r + b] += va * row[b];
                }
            }
        }
        for a in 0..r {
            for b in 0..a {
                g[a * r + b] = g[b * r + a];
            }
        }
        g
    }

    /// Hadamard product of all Gram matrices except mode `skip`.
    fn gram_complement(grams: &[Vec<f64>], skip: usize, r: usize) -> Vec<f64> {
        let mut h = vec![1.0; r * r];
        for (m, g) in grams.iter().enumerate() {
            if m != skip {
                h.iter_mut().zip(g).for_each(|(a, b)| *a *= b);
            }
        }
        h
    }

    /// Per-column curvature bounds for every factor: absolute row sums of
    /// `J_n^T J_n = *_{m != n} V_m^T V_m`. A diagonal matrix of row sums
    /// dominates a symmetric PSD matrix, so stepping with its inverse is safe.
    ///
    /// With `weights`, row sums are weighted, `sum_b w_b |H_ab|`. For
    /// weights in `[0, 1]` this bounds the curvature of the model
    /// `[[V_0 diag(w), V_1, ...]]` with respect to any factor.
    pub(crate) fn column_curvatures(&self, weights: Option<&[f64]>) -> Vec<Vec<f64>> {
        let r = self.rank;
        let grams: Vec<Vec<f64>> = (0..self.order()).map(|n| self.gram(n)).collect();
        (0..self.order())
            .map(|n| {
                let h = Self::gram_complement(&grams, n, r);
                match weights {
                    Some(w) => h
                        .chunks_exact(r)
                        .map(|row| row.iter().zip(w).map(|(v, wb)| wb * v.abs()).sum())
                        .collect(),
                    None => h.chunks_exact(r).map(|row| row.iter().map(|v| v.abs()).sum()).collect(),
                }
            })
            .collect()
    }

    /// Depth-first walk over all but the last mode. The last mode is the
    /// innermost, contiguous axis.
    fn sweep(&self, mut job: Sweep<'_>) {
        let n = self.order();
        let r = self.rank;
        let mut left = vec![vec![1.0; r]; n];
        let mut acc = vec![vec![0.0; r]; n];
        self.visit(0, 0, &mut left, &mut acc, &mut job);
    }

    fn visit(
        &self,
        d: usize,
        base: usize,
        left: &mut [Vec<f64>],
        acc: &mut [Vec<f64>],
        job: &mut Sweep<'_>,
    ) {
        let n = self.order();
        let r = self.rank;
        if d + 1 == n {
            let last = self.dims[d];
            let vl = &self.factors[d];
            let lp = &left[d];
            let q = &mut acc[d];
            match job {
                Sweep::Reconstruct(out) => {
                    for l in 0..last {
                        let row = &vl[l * r..(l + 1) * r];
                        out[base * last + l] = lp.iter().zip(row).map(|(a, b)| a * b).sum();
                    }
                }
                Sweep::Mttkrp { t, grads } => {
                    q.iter_mut().for_each(|v| *v = 0.0);
                    let g_last = &mut grads[d];
                    for l in 0..last {
                        let e = t[base * last + l];
                        if e == 0.0 {
                            continue;
                        }
                        let row = &vl[l * r..(l + 1) * r];
                        let grow = &mut g_last[l * r..(l + 1) * r];
                        for k in 0..r {
                            q[k] += e * row[k];
                            grow[k] += e * lp[k];
                        }
                    }
                }
            }
            return;
        }
        let is_grad = matches!(job, Sweep::Mttkrp { .. });
        if is_grad {
            acc[d].iter_mut().for_each(|v| *v = 0.0);
        }
        for i in 0..self.dims[d] {
            let row = &self.factors[d][i * r..(i + 1) * r];
            {
                let (head, tail) = left.split_at_mut(d + 1);
                let dst = &mut tail[0];
                for k in 0..r {
                    dst[k] = head[d][k] * row[k];
                }
            }
            self.visit(d + 1, base * self.dims[d] + i, left, acc, job);
            if let Sweep::Mttkrp { grads, .. } = job {
                let (head, tail) = acc.split_at_mut(d + 1);
                let child = &tail[0];
                let here = &mut head[d];
                let grow = &mut grads[d][i * r..(i + 1) * r];
                let lp = &left[d];
                for k in 0..r {
                    grow[k] += lp[k] * child[k];
                    here[k] += row[k] * child[k];
                }
            }
        }
    }
}

enum Sweep<'a> {
    Reconstruct(&'a mut [f64]),
    Mttkrp { t: &'a [f64], grads: &'a mut Vec<Vec<f64>> },
}

/// Plain Kruskal reconstruction.
pub fn cp_reconstruct(f: &CpFactors) -> DenseTensor {
    f.reconstruct()
}

/// Result of an ALS run: factors plus the loss after every sweep.
#[derive(Debug, Clone)]
pub struct AlsResult {
    pub factors: CpFactors,
    pub losses: Vec<f64>,
}

const ALS_RIDGE: f64 = 1e-10;

/// Alternating least squares for CP, started from the leading singular
/// vectors of each unfolding. Each factor update solves the Khatri-Rao
/// normal equations with a `1e-10` diagonal ridge.
pub fn als_oracle_cp(w: &DenseTensor, rank: usize, sweeps: usize, seed: u64) -> Result<AlsResult> {
    if rank == 0 || sweeps == 0 {
        return Err(Error::InvalidRank("ALS needs rank >= 1 and sweeps >= 1".into()));
    }
    let mut f = super::init::uniform_cp(w, rank, 1.0, seed)?;
    let r = rank;
    for n in 1..f.order() {
        seed_with_singular_vectors(w, &mut f, n);
    }
    let mut losses = Vec::with_capacity(sweeps);
    for _ in 0..sweeps {
        for n in 0..f.order() {
            let grams: Vec<Vec<f64>> = (0..f.order()).map(|m| f.gram(m)).collect();
            let mut h = CpFactors::gram_complement(&grams, n, r);
            for k in 0..r {
                h[k * r + k] += ALS_RIDGE;
            }
            let h = DMatrix::from_row_slice(r, r, &h);
            let chol = h
                .cholesky()
                .ok_or_else(|| Error::NonFinite("ALS normal equations are not positive definite".into()))?;
            let rhs = f.mttkrp(w).swap_remove(n);
            let rows = f.dims[n];
            let mut updated = vec![0.0; rows * r];
            for i in 0..rows {
                let b = DVector::from_row_slice(&rhs[i * r..(i + 1) * r]);
                let x = chol.solve(&b);
                updated[i * r..(i + 1) * r].copy_from_slice(x.as_slice());
            }
            f.factors[n] = updated;
        }
        let loss = w.sub(&f.reconstruct())?.frobenius_norm_sq();
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: losses.len(), loss });
        }
        losses.push(loss);
    }
    Ok(AlsResult { factors: f, losses })
}

/// Overwrites the leading columns of factor `n` with the top left singular
/// vectors of the mode-`n` unfolding of `w`. Columns past `I_n` keep their
/// random values.
fn seed_with_singular_vectors(w: &DenseTensor, f: &mut CpFactors, n: usize) {
    let rows = w.dims()[n];
    let strides = w.shape().strides();
    let mut gram = DMatrix::<f64>::zeros(rows, rows);
    let inner = strides[n];
    let outer = w.numel() / (rows * inner);
    let data = w.data();
    for o in 0..outer {
        for s in 0..inner {
            let base = o * rows * inner + s;
            for a in 0..rows {
                let va = data[base + a * inner];
                if va == 0.0 {
                    continue;
                }
                for b in 0..rows {
                    gram[(a, b)] += va * data[base + b * inner];
                }
            }
        }
    }
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let r = f.rank;
    for (col, &e) in order.iter().take(r).enumerate() {
        if eig.eigenvalues[e] <= 0.0 {
            break;
        }
        for i in 0..rows {
            f.factors[n][i * r + col] = eig.eigenvectors[(i, e)];
        }
    }
}

/// Factored forward pass of a CP kernel over `(O, C, k1, k2)`: pointwise
/// `C -> R`, vertical 1-D pass, horizontal 1-D pass, pointwise `R -> O`.
pub fn cp_conv_forward(
    f: &CpFactors,
    input: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<DenseTensor> {
    let &[o_ch, c_ch, k1, k2] = f.dims() else {
        return Err(Error::ShapeMismatch("CP conv factors must be 4-way".into()));
    };
    let &[c_in, h, w] = input.dims() else {
        return Err(Error::ShapeMismatch(format!("input must be (C, H, W), got {:?}", input.dims())));
    };
    if c_in != c_ch {
        return Err(Error::ShapeMismatch(format!("input has {c_in} channels, kernel expects {c_ch}")));
    }
    let ho = conv_output_size(h, k1, stride, padding)?;
    let wo = conv_output_size(w, k2, stride, padding)?;
    let r = f.rank();
    let (vo, vc, va, vb) = (f.factor(0), f.factor(1), f.factor(2), f.factor(3));
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let x = input.data();

    // Stage 1: channel contraction into a zero-padded rank stack.
    let mut z1 = vec![0.0; r * hp * wp];
    for c in 0..c_ch {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for k in 0..r {
            let coef = vc[c * r + k];
            if coef == 0.0 {
                continue;
            }
            let dst = &mut z1[k * hp * wp..(k + 1) * hp * wp];
            for y in 0..h {
                let src = &plane[y * w..(y + 1) * w];
                let row = &mut dst[(y + padding) * wp + padding..(y + padding) * wp + padding + w];
                row.iter_mut().zip(src).for_each(|(d, s)| *d += coef * s);
            }
        }
    }

    // Stage 2: vertical pass, (R, hp, wp) -> (R, ho, wp).
    let mut z2 = vec![0.0; r * ho * wp];
    for k in 0..r {
        for y in 0..ho {
            let dst = &mut z2[(k * ho + y) * wp..(k * ho + y + 1) * wp];
            for a in 0..k1 {
                let coef = va[a * r + k];
                let src_row = k * hp * wp + (y * stride + a) * wp;
                let src = &z1[src_row..src_row + wp];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += coef * s);
            }
        }
    }

    // Stage 3: horizontal pass, (R, ho, wp) -> (R, ho, wo).
    let mut z3 = vec![0.0; r * ho * wo];
    for k in 0..r {
        for y in 0..ho {
            let src = &z2[(k * ho + y) * wp..(k * ho + y + 1) * wp];
            let dst = &mut z3[(k * ho + y) * wo..(k * ho + y + 1) * wo];
            for (xo, d) in dst.iter_mut().enumerate() {
                *d = (0..k2).map(|b| vb[b * r + k] * src[xo * stride + b]).sum();
            }
        }
    }

    // Stage 4: rank expansion to output channels.
    let plane = ho * wo;
    let mut out = vec![0.0; o_ch * plane];
    for o in 0..o_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        for k in 0..r {
            let coef = vo[o * r + k];
            if coef == 0.0 {
                continue;
            }
            let src = &z3[k * plane..(k + 1) * plane];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += coef * s);
        }
    }
    DenseTensor::new(vec![o_ch, ho, wo], out)
}
