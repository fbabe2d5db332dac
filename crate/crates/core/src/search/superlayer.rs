//! A layer replaced by a softmax-weighted mixture of rank candidates.

use serde::{Deserialize, Serialize};

use crate::decomposition::{init, CpFactors, DecompKind, DescentState, Factors};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

/// One candidate decomposition and its selection score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCandidate {
    pub rank: usize,
    pub factors: Factors,
    pub alpha: f64,
}

/// Loss of a single layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `decomposition + gamma * rank`.
    pub total: f64,
    /// `||W - sum_r p_r W_r||^2`.
    pub decomposition: f64,
    /// `(sum_r p_r r)^beta`.
    pub rank: f64,
}

/// Gradient of the total loss with respect to every candidate block and
/// every alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperGradient {
    /// `factors[c][b]` matches `candidates[c].factors.blocks()[b]`.
    pub factors: Vec<Vec<Vec<f64>>>,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SuperLayer {
    target: DenseTensor,
    candidates: Vec<RankCandidate>,
    states: Vec<DescentState>,
    alpha_velocity: Vec<f64>,
}

/// Everything one evaluation of the layer produces.
struct Evaluation {
    loss: LossBreakdown,
    grads: Vec<Vec<Vec<f64>>>,
    curvatures: Vec<Vec<Vec<f64>>>,
    alpha_grads: Vec<f64>,
}

/// Numerically stable softmax.
pub fn softmax(alphas: &[f64]) -> Vec<f64> {
    let top = alphas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alphas.iter().map(|a| (a - top).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl SuperLayer {
    /// Fresh candidates at `ranks` with alphas at zero. Each candidate is
    /// initialized exactly as a single-rank fit with the same seed would be.
    pub fn new(target: DenseTensor, kind: DecompKind, ranks: &[usize], init_scale: f64, seed: u64) -> Result<Self> {
        let order = target.order();
        let candidates = ranks
            .iter()
            .map(|&r| {
                let spec = kind.rank_spec(r, order);
                spec.validate(target.dims())?;
                let factors = init::initial_factors(&target, &spec, init_scale, seed)?;
                Ok(RankCandidate { rank: r, factors, alpha: 0.0 })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_candidates(target, candidates)
    }

    pub fn from_candidates(target: DenseTensor, candidates: Vec<RankCandidate>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidRank("a super layer needs at least one candidate".into()));
        }
        let is_cp = matches!(candidates[0].factors, Factors::Cp(_));
        for c in &candidates {
            if c.rank == 0 {
                return Err(Error::InvalidRank("candidate rank must be positive".into()));
            }
            if matches!(c.factors, Factors::Cp(_)) != is_cp {
                return Err(Error::InvalidConfig("candidates mix CP and TT factors".into()));
            }
            let dims = match &c.factors {
                Factors::Cp(f) => f.dims(),
                Factors::Tt(f) => f.dims(),
            };
            if dims != target.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "candidate of rank {} has dims {:?}, target {:?}",
                    c.rank,
                    dims,
                    target.dims()
                )));
            }
            if !c.alpha.is_finite() {
                return Err(Error::NonFinite("candidate alpha".into()));
            }
        }
        let n = candidates.len();
        Ok(Self {
            target,
            candidates,
            states: vec![DescentState::default(); n],
            alpha_velocity: vec![0.0; n],
        })
    }

    pub fn target(&self) -> &DenseTensor {
        &self.target
    }

    pub fn candidates(&self) -> &[RankCandidate] {
        &self.candidates
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.rank).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.alpha).collect()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.alphas())
    }

    /// `sum_r p_r W_r`.
    pub fn mixture(&self) -> DenseTensor {
        let p = self.probabilities();
        let mut out = DenseTensor::zeros(self.target.dims().to_vec()).unwrap();
        for (c, pr) in self.candidates.iter().zip(&p) {
            out = out.add(&c.factors.reconstruct().scale(*pr)).unwrap();
        }
        out
    }

    pub fn loss(&self, gamma: f64, beta: f64) -> LossBreakdown {
        self.evaluate(gamma, beta, false).loss
    }

    pub fn gradient(&self, gamma: f64, beta: f64) -> SuperGradient {
        let e = self.evaluate(gamma, beta, true);
        SuperGradient { factors: e.grads, alphas: e.alpha_grads }
    }

    /// All factor entries followed by all alphas.
    pub fn params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.candidates.iter().flat_map(|c| c.factors.blocks().iter().flatten().copied()).collect();
        out.extend(self.alphas());
        out
    }

    /// Inverse of [`SuperLayer::params`].
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params().len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters given, layer has {}",
                values.len(),
                self.params().len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("super layer parameters".into()));
        }
        let mut it = values.iter();
        for c in &mut self.candidates {
            for block in c.factors.blocks_mut() {
                block.iter_mut().for_each(|v| *v = *it.next().unwrap());
            }
        }
        for c in &mut self.candidates {
            c.alpha = *it.next().unwrap();
        }
        Ok(())
    }

    /// [`SuperGradient`] flattened in [`SuperLayer::params`] order.
    pub fn flat_gradient(&self, gamma: f64, beta: f64) -> Vec<f64> {
        let g = self.gradient(gamma, beta);
        let mut out: Vec<f64> = g.factors.into_iter().flatten().flatten().collect();
        out.extend(g.alphas);
        out
    }

    /// One descent step on every candidate's factors. Returns the loss
    /// before the step.
    pub fn update_weights(&mut self, gamma: f64, beta: f64, lr: f64, momentum: f64) -> Result<LossBreakdown> {
        let e = self.checked(gamma, beta)?;
        self.apply_weights(&e, lr, momentum);
        Ok(e.loss)
    }

    /// One descent step on the alphas. Returns the loss before the step.
    pub fn update_alphas(&mut self, gamma: f64, beta: f64, lr: f64, momentum: f64) -> Result<LossBreakdown> {
        let e = self.checked(gamma, beta)?;
        self.apply_alphas(&e, lr, momentum);
        Ok(e.loss)
    }

    /// Both updates from a single evaluation of the gradient.
    pub fn step(&mut self, gamma: f64, beta: f64, lr_w: f64, lr_alpha: f64, momentum: f64) -> Result<LossBreakdown> {
        let e = self.checked(gamma, beta)?;
        self.apply_weights(&e, lr_w, momentum);
        self.apply_alphas(&e, lr_alpha, momentum);
        Ok(e.loss)
    }

    /// Rank of the most probable candidate; ties go to the smallest rank.
    pub fn select_rank(&self) -> usize {
        select_rank(&self.ranks(), &self.alphas())
    }

    fn checked(&mut self, gamma: f64, beta: f64) -> Result<Evaluation> {
        let e = self.evaluate_with_warm(gamma, beta, true);
        if !e.loss.total.is_finite() {
            return Err(Error::Diverged { iteration: 0, loss: e.loss.total });
        }
        Ok(e)
    }

    fn apply_weights(&mut self, e: &Evaluation, lr: f64, momentum: f64) {
        for (((c, state), g), curv) in self.candidates.iter_mut().zip(&mut self.states).zip(&e.grads).zip(&e.curvatures) {
            state.apply(c.factors.blocks_mut(), g, curv, lr, momentum);
        }
    }

    fn apply_alphas(&mut self, e: &Evaluation, lr: f64, momentum: f64) {
        for ((c, v), g) in self.candidates.iter_mut().zip(&mut self.alpha_velocity).zip(&e.alpha_grads) {
            *v = momentum * *v + g;
            c.alpha -= lr * (g + momentum * *v);
        }
    }

    fn evaluate(&self, gamma: f64, beta: f64, grads: bool) -> Evaluation {
        let mut scratch = self.clone();
        scratch.evaluate_with_warm(gamma, beta, grads)
    }

    fn evaluate_with_warm(&mut self, gamma: f64, beta: f64, want_grads: bool) -> Evaluation {
        let p = self.probabilities();
        let (decomposition, inner, grads, curvatures) = match self.candidates[0].factors {
            Factors::Cp(_) => self.eval_cp(&p, want_grads),
            Factors::Tt(_) => self.eval_tt(&p, want_grads),
        };
        let ranks: Vec<f64> = self.candidates.iter().map(|c| c.rank as f64).collect();
        let expected: f64 = p.iter().zip(&ranks).map(|(a, b)| a * b).sum();
        let rank = expected.powf(beta);
        let loss = LossBreakdown { total: decomposition + gamma * rank, decomposition, rank };
        let alpha_grads = if want_grads {
            let slope = if beta == 0.0 { 0.0 } else { gamma * beta * expected.powf(beta - 1.0) };
            let g: Vec<f64> = inner.iter().zip(&ranks).map(|(d, r)| 2.0 * d + slope * r).collect();
            let mean: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
            p.iter().zip(&g).map(|(pj, gj)| pj * (gj - mean)).collect()
        } else {
            Vec::new()
        };
        Evaluation { loss, grads, curvatures, alpha_grads }
    }

    /// The mixture of CP candidates is itself a CP tensor whose columns are
    /// the concatenated candidate columns, with factor 0 weighted by `p`.
    #[allow(clippy::type_complexity)]
    fn eval_cp(&self, p: &[f64], want_grads: bool) -> (f64, Vec<f64>, Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
        let parts: Vec<&CpFactors> = self
            .candidates
            .iter()
            .map(|c| match &c.factors {
                Factors::Cp(f) => f,
                Factors::Tt(_) => unreachable!(),
            })
            .collect();
        let dims = self.target.dims().to_vec();
        let total: usize = parts.iter().map(|f| f.rank()).sum();
        let mut weights = Vec::with_capacity(total);
        for (f, pr) in parts.iter().zip(p) {
            weights.extend(std::iter::repeat_n(*pr, f.rank()));
        }
        let mut plain: Vec<Vec<f64>> = (0..dims.len())
            .map(|n| {
                let mut m = Vec::with_capacity(dims[n] * total);
                for i in 0..dims[n] {
                    for f in &parts {
                        let r = f.rank();
                        m.extend_from_slice(&f.factor(n)[i * r..(i + 1) * r]);
                    }
                }
                m
            })
            .collect();
        let curv_model = if want_grads {
            Some(CpFactors::new(dims.clone(), total, plain.clone()))
        } else {
            None
        };
        for row in plain[0].chunks_exact_mut(total) {
            row.iter_mut().zip(&weights).for_each(|(v, w)| *v *= w);
        }
        let joint = match CpFactors::new(dims.clone(), total, plain) {
            Ok(j) => j,
            Err(_) => return (f64::NAN, Vec::new(), Vec::new(), Vec::new()),
        };
        let residual = joint.reconstruct().sub(&self.target).unwrap();
        let decomposition = residual.frobenius_norm_sq();
        if !want_grads || !decomposition.is_finite() {
            return (decomposition, Vec::new(), Vec::new(), Vec::new());
        }
        let joint_grads = joint.mttkrp(&residual);
        let joint_curv = match curv_model {
            Some(Ok(m)) => m.column_curvatures(Some(&weights)),
            _ => return (f64::NAN, Vec::new(), Vec::new(), Vec::new()),
        };
        let mut inner = vec![0.0; parts.len()];
        let mut grads = Vec::with_capacity(parts.len());
        let mut curvatures = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for (c, (f, pr)) in parts.iter().zip(p).enumerate() {
            let r = f.rank();
            let mut g_c = Vec::with_capacity(dims.len());
            let mut k_c = Vec::with_capacity(dims.len());
            for n in 0..dims.len() {
                let mut g = Vec::with_capacity(dims[n] * r);
                for i in 0..dims[n] {
                    let row = &joint_grads[n][i * total + offset..i * total + offset + r];
                    if n == 0 {
                        let own = &f.factor(0)[i * r..(i + 1) * r];
                        inner[c] += own.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                        g.extend(row.iter().map(|v| v * pr * 2.0));
                    } else {
                        g.extend(row.iter().map(|v| v * 2.0));
                    }
                }
                g_c.push(g);
                k_c.push(joint_curv[n][offset..offset + r].to_vec());
            }
            grads.push(g_c);
            curvatures.push(k_c);
            offset += r;
        }
        (decomposition, inner, grads, curvatures)
    }

    #[allow(clippy::type_complexity)]
    fn eval_tt(&mut self, p: &[f64], want_grads: bool) -> (f64, Vec<f64>, Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
        let recons: Vec<DenseTensor> = self.candidates.iter().map(|c| c.factors.reconstruct()).collect();
        let mut mixture = DenseTensor::zeros(self.target.dims().to_vec()).unwrap();
        for (w, pr) in recons.iter().zip(p) {
            mixture = mixture.add(&w.scale(*pr)).unwrap();
        }
        let residual = mixture.sub(&self.target).unwrap();
        let decomposition = residual.frobenius_norm_sq();
        if !want_grads {
            return (decomposition, Vec::new(), Vec::new(), Vec::new());
        }
        let inner: Vec<f64> = recons.iter().map(|w| residual.dot(w)).collect();
        let grads: Vec<Vec<Vec<f64>>> = self
            .candidates
            .iter()
            .zip(p)
            .map(|(c, pr)| {
                let mut g = c.factors.contract_residual(&residual);
                g.iter_mut().flatten().for_each(|v| *v *= pr * 2.0);
                g
            })
            .collect();
        let own: Vec<Vec<f64>> = self
            .candidates
            .iter()
            .zip(&mut self.states)
            .map(|(c, s)| c.factors.block_curvatures(s.warm_mut()).into_iter().map(|v| v[0]).collect())
            .collect();
        // Block Gershgorin bound across candidates sharing the residual,
        // without the candidate's own probability factor (p <= 1).
        let curvatures = (0..own.len())
            .map(|a| {
                (0..own[a].len())
                    .map(|k| {
                        let cross: f64 = (0..own.len())
                            .filter(|&b| b != a)
                            .map(|b| p[b] * (own[a][k] * own[b][k]).sqrt())
                            .sum();
                        vec![p[a] * own[a][k] + cross]
                    })
                    .collect()
            })
            .collect();
        (decomposition, inner, grads, curvatures)
    }
}

/// Rank of the largest alpha; ties go to the smallest rank.
pub fn select_rank(ranks: &[usize], alphas: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..ranks.len() {
        if alphas[i] > alphas[best] || (alphas[i] == alphas[best] && ranks[i] < ranks[best]) {
            best = i;
        }
    }
    ranks[best]
}
