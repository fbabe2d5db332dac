//! Coarse-to-fine differentiable rank search.

mod superlayer;

pub use superlayer::{select_rank, softmax, LossBreakdown, RankCandidate, SuperGradient, SuperLayer};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{annealed, decompose_sgd, DecompKind, DecomposeConfig, KernelFactors};
use crate::error::{Error, Result};
use crate::tensor::ConvKernel;

/// Evenly spaced candidate ranks `lower, lower + step, ..., upper`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankSet {
    pub lower: usize,
    pub upper: usize,
    pub step: usize,
    pub ranks: Vec<usize>,
}

impl RankSet {
    pub fn new(lower: usize, upper: usize, step: usize) -> Result<Self> {
        if lower == 0 {
            return Err(Error::InvalidBounds("lower bound must be at least 1".into()));
        }
        if step == 0 {
            return Err(Error::InvalidBounds("step must be at least 1".into()));
        }
        if upper < lower {
            return Err(Error::InvalidBounds(format!("upper bound {upper} below lower bound {lower}")));
        }
        if !(upper - lower).is_multiple_of(step) {
            return Err(Error::InvalidBounds(format!(
                "interval [{lower}, {upper}] is not divisible by step {step}"
            )));
        }
        let ranks = (lower..=upper).step_by(step).collect();
        Ok(Self { lower, upper, step, ranks })
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

/// One rank set per layer from per-layer bounds and a shared step.
pub fn rss_function(lower: &[usize], upper: &[usize], step: usize, n: usize) -> Result<Vec<RankSet>> {
    if lower.len() != n || upper.len() != n {
        return Err(Error::InvalidBounds(format!(
            "{} lower and {} upper bounds for {n} layers",
            lower.len(),
            upper.len()
        )));
    }
    lower.iter().zip(upper).map(|(&lb, &ub)| RankSet::new(lb, ub, step)).collect()
}

/// `sum_i (sum_r p_i(r) r)^beta`.
pub fn rank_loss(layers: &[(Vec<f64>, Vec<usize>)], beta: f64) -> f64 {
    layers
        .iter()
        .map(|(p, ranks)| p.iter().zip(ranks).map(|(a, &r)| a * r as f64).sum::<f64>().powf(beta))
        .sum()
}

/// Per-layer bounds of the next phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Refined {
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
    pub step: usize,
}

/// Centers an interval of half-width `step / 2` on every selected rank and
/// shrinks the step tenfold. `limits[i]` is the admissible `[min, max]` of
/// layer `i`; after clamping, the upper bound drops until the interval is
/// divisible by the new step.
pub fn refine_search_space(selected: &[usize], step: usize, limits: &[(usize, usize)]) -> Result<Refined> {
    if selected.len() != limits.len() {
        return Err(Error::InvalidBounds("one limit pair per selected rank is required".into()));
    }
    let new_step = (step / 10).max(1);
    let half = step / 2;
    let mut lower = Vec::with_capacity(selected.len());
    let mut upper = Vec::with_capacity(selected.len());
    for (&sr, &(lo, hi)) in selected.iter().zip(limits) {
        if lo == 0 || hi < lo {
            return Err(Error::InvalidBounds(format!("invalid limits [{lo}, {hi}]")));
        }
        let lb = sr.saturating_sub(half).clamp(lo, hi);
        let mut ub = (sr + half).clamp(lo, hi);
        ub -= (ub - lb) % new_step;
        lower.push(lb);
        upper.push(ub);
    }
    Ok(Refined { lower, upper, step: new_step })
}

/// Initial per-layer bounds and step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
    pub step: usize,
}

impl SearchSpace {
    pub fn uniform(layers: usize, lower: usize, upper: usize, step: usize) -> Self {
        Self { lower: vec![lower; layers], upper: vec![upper; layers], step }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Weight of the rank loss.
    pub gamma: f64,
    /// Exponent of the expected rank.
    pub beta: f64,
    pub lr_weights: f64,
    pub lr_alpha: f64,
    pub iterations_per_phase: usize,
    /// Cosine annealing of both learning rates within each phase.
    pub cosine: bool,
    pub momentum: f64,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            beta: 0.6,
            lr_weights: 0.1,
            lr_alpha: 0.1,
            iterations_per_phase: 1000,
            cosine: true,
            momentum: 0.9,
            seed: 0,
            init_scale: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig("beta must lie in [0, 1]".into()));
        }
        if !positive(self.lr_weights) || !positive(self.lr_alpha) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.iterations_per_phase == 0 {
            return Err(Error::InvalidConfig("iterations per phase must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if !positive(self.init_scale) {
            return Err(Error::InvalidConfig("init scale must be positive".into()));
        }
        Ok(())
    }

    /// Single-rank fit with the same optimizer settings.
    pub fn decompose_config(&self) -> DecomposeConfig {
        DecomposeConfig {
            learning_rate: self.lr_weights,
            iterations: self.iterations_per_phase,
            momentum: self.momentum,
            seed: self.seed,
            init_scale: self.init_scale,
            cosine: self.cosine,
        }
    }
}

/// Loss traces and outcome of one search phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseHistory {
    pub step: usize,
    pub rank_sets: Vec<Vec<usize>>,
    pub selected: Vec<usize>,
    /// Model totals per iteration, summed over layers.
    pub total_loss: Vec<f64>,
    pub rank_loss: Vec<f64>,
    pub decomposition_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProbability {
    pub rank: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub decomposition: DecompKind,
    pub config: SearchConfig,
    pub initial_space: SearchSpace,
    pub selected_ranks: Vec<usize>,
    pub phases: Vec<PhaseHistory>,
    /// Candidate probabilities of the last phase, per layer.
    pub final_probabilities: Vec<Vec<RankProbability>>,
}

struct LayerPhase {
    selected: usize,
    trace: Vec<LossBreakdown>,
    probabilities: Vec<RankProbability>,
}

fn search_layer(
    kernel: &ConvKernel,
    kind: DecompKind,
    ranks: &[usize],
    cfg: &SearchConfig,
) -> Result<LayerPhase> {
    let target = kind.target(kernel);
    let mut layer = SuperLayer::new(target, kind, ranks, cfg.init_scale, cfg.seed)?;
    let t_max = cfg.iterations_per_phase;
    let mut trace = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let lr_w = annealed(cfg.lr_weights, t, t_max, cfg.cosine);
        let lr_a = annealed(cfg.lr_alpha, t, t_max, cfg.cosine);
        let loss = layer
            .step(cfg.gamma, cfg.beta, lr_w, lr_a, cfg.momentum)
            .map_err(|e| match e {
                Error::Diverged { loss, .. } => Error::Diverged { iteration: t, loss },
                other => other,
            })?;
        trace.push(loss);
    }
    let probabilities = layer
        .ranks()
        .into_iter()
        .zip(layer.probabilities())
        .map(|(rank, probability)| RankProbability { rank, probability })
        .collect();
    Ok(LayerPhase { selected: layer.select_rank(), trace, probabilities })
}

/// Runs search phases until the step reaches 1, then one more phase at
/// step 1. Candidates start fresh in every phase. Upper bounds above a
/// layer's rank cap are lowered to the cap.
pub fn run_search(
    model: &[ConvKernel],
    kind: DecompKind,
    space: &SearchSpace,
    cfg: &SearchConfig,
) -> Result<SearchReport> {
    cfg.validate()?;
    let n = model.len();
    let initial = rss_function(&space.lower, &space.upper, space.step, n)?;
    let mut limits = Vec::with_capacity(n);
    for (i, (k, set)) in model.iter().zip(&initial).enumerate() {
        let cap = kind.rank_cap(kind.target(k).dims());
        if set.lower > cap {
            return Err(Error::InvalidBounds(format!(
                "layer {i}: lower bound {} exceeds the rank cap {cap}",
                set.lower
            )));
        }
        limits.push((set.lower, set.upper.min(cap)));
    }
    let mut lower = space.lower.clone();
    let mut upper: Vec<usize> = limits
        .iter()
        .zip(&lower)
        .map(|(&(_, hi), &lb)| hi - (hi - lb) % space.step)
        .collect();
    let mut step = space.step;
    let mut phases = Vec::new();
    loop {
        let sets = rss_function(&lower, &upper, step, n)?;
        let results = model
            .par_iter()
            .zip(&sets)
            .map(|(k, set)| search_layer(k, kind, &set.ranks, cfg))
            .collect::<Result<Vec<_>>>()?;
        let iters = cfg.iterations_per_phase;
        let mut history = PhaseHistory {
            step,
            rank_sets: sets.iter().map(|s| s.ranks.clone()).collect(),
            selected: results.iter().map(|r| r.selected).collect(),
            total_loss: vec![0.0; iters],
            rank_loss: vec![0.0; iters],
            decomposition_loss: vec![0.0; iters],
        };
        for r in &results {
            for (t, l) in r.trace.iter().enumerate() {
                history.total_loss[t] += l.total;
                history.rank_loss[t] += l.rank;
                history.decomposition_loss[t] += l.decomposition;
            }
        }
        let selected = history.selected.clone();
        let probabilities: Vec<Vec<RankProbability>> = results.into_iter().map(|r| r.probabilities).collect();
        phases.push(history);
        if step <= 1 || sets.iter().all(|s| s.len() == 1) {
            return Ok(SearchReport {
                decomposition: kind,
                config: cfg.clone(),
                initial_space: space.clone(),
                selected_ranks: selected,
                phases,
                final_probabilities: probabilities,
            });
        }
        let next = refine_search_space(&selected, step, &limits)?;
        lower = next.lower;
        upper = next.upper;
        step = next.step;
    }
}

/// A layer fitted at its selected rank.
#[derive(Debug, Clone)]
pub struct FinalLayer {
    pub factors: KernelFactors,
    /// `||W - recon|| / ||W||` (0 for a zero kernel).
    pub relative_error: f64,
    pub losses: Vec<f64>,
}

/// Independent single-rank fits of every layer at its selected rank.
pub fn final_decompose(
    model: &[ConvKernel],
    kind: DecompKind,
    ranks: &[usize],
    cfg: &DecomposeConfig,
) -> Result<Vec<FinalLayer>> {
    if ranks.len() != model.len() {
        return Err(Error::InvalidRank(format!("{} ranks for {} layers", ranks.len(), model.len())));
    }
    model
        .par_iter()
        .zip(ranks)
        .map(|(k, &r)| {
            let target = kind.target(k);
            let spec = kind.rank_spec(r, target.order());
            let out = decompose_sgd(&target, &spec, cfg)?;
            let norm = target.frobenius_norm();
            let relative_error = if norm == 0.0 { out.final_loss.sqrt() } else { out.final_loss.sqrt() / norm };
            let factors = KernelFactors::from_target_factors(out.factors, k.tensor().dims().try_into().unwrap())?;
            Ok(FinalLayer { factors, relative_error, losses: out.losses })
        })
        .collect()
}
