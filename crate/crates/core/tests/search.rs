mod common;

use common::{cp_entry, planted_kernel, random_cp, random_tensor, rel_err};
use rankfit_core::decomposition::{decompose_sgd, init, DecompKind, DecomposeConfig, Factors, RankSpec};
use rankfit_core::search::*;
use rankfit_core::{ConvKernel, DenseTensor, Error};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn rss_examples() {
    let sets = rss_function(&[100], &[800], 100, 1).unwrap();
    assert_eq!(sets[0].ranks, vec![100, 200, 300, 400, 500, 600, 700, 800]);
    assert_eq!(rss_function(&[5], &[5], 1, 1).unwrap()[0].ranks, vec![5]);
    let fine = rss_function(&[150], &[250], 10, 1).unwrap();
    assert_eq!(fine[0].len(), 11);
    assert_eq!(fine[0].ranks.first(), Some(&150));
    assert_eq!(fine[0].ranks.last(), Some(&250));
}

#[test]
fn rss_rejects_bad_bounds() {
    for (lb, ub, s) in [(10, 95, 10), (50, 40, 10), (10, 20, 0), (0, 10, 5)] {
        assert!(matches!(rss_function(&[lb], &[ub], s, 1), Err(Error::InvalidBounds(_))), "{lb} {ub} {s}");
    }
    assert!(rss_function(&[10, 10], &[20], 10, 2).is_err());
}

#[test]
fn rank_loss_examples() {
    assert_eq!(rank_loss(&[(vec![1.0], vec![100])], 1.0), 100.0);
    let p = softmax(&[0.0, 0.0]);
    assert!(close(rank_loss(&[(p.clone(), vec![100, 200])], 1.0), 150.0, 1e-12));
    let oracle = (0.6 * 150f64.ln()).exp();
    assert!(close(rank_loss(&[(p, vec![100, 200])], 0.6), oracle, 1e-12));
}

fn exact_candidate(f: &rankfit_core::decomposition::CpFactors, alpha: f64) -> RankCandidate {
    RankCandidate { rank: f.rank(), factors: Factors::Cp(f.clone()), alpha }
}

#[test]
fn total_loss_closed_forms() {
    let f = random_cp(&[4, 4, 3, 3], 3, 1);
    let w = f.reconstruct();
    let layer = SuperLayer::from_candidates(w.clone(), vec![exact_candidate(&f, 0.3), exact_candidate(&f, -1.0)]).unwrap();
    assert!(layer.loss(0.0, 0.6).total.abs() < 1e-20);

    let f32_ = random_cp(&[4, 4, 3, 3], 32, 2);
    let layer = SuperLayer::from_candidates(f32_.reconstruct(), vec![exact_candidate(&f32_, 0.0)]).unwrap();
    let l = layer.loss(0.2, 0.6);
    assert!(l.decomposition.abs() < 1e-20);
    assert!(close(l.total, 0.2 * 32f64.powf(0.6), 1e-12));
}

#[test]
fn total_loss_matches_direct_summation() {
    let w = random_tensor(vec![3, 4, 2, 2], 3);
    let cands: Vec<_> = [(2, 0.4), (3, -0.2), (5, 1.1)]
        .iter()
        .enumerate()
        .map(|(i, &(r, a))| exact_candidate(&random_cp(&[3, 4, 2, 2], r, 10 + i as u64), a))
        .collect();
    let layer = SuperLayer::from_candidates(w.clone(), cands.clone()).unwrap();
    let (gamma, beta) = (0.7, 0.6);

    let z: f64 = cands.iter().map(|c| c.alpha.exp()).sum();
    let p: Vec<f64> = cands.iter().map(|c| c.alpha.exp() / z).collect();
    let mut decomp = 0.0;
    for i in 0..3 {
        for j in 0..4 {
            for k in 0..2 {
                for l in 0..2 {
                    let mut m = 0.0;
                    for (c, pc) in cands.iter().zip(&p) {
                        let Factors::Cp(f) = &c.factors else { unreachable!() };
                        m += pc * cp_entry(f, &[i, j, k, l]);
                    }
                    let d = w.get(&[i, j, k, l]) - m;
                    decomp += d * d;
                }
            }
        }
    }
    let expected_rank: f64 = p.iter().zip([2.0, 3.0, 5.0]).map(|(a, b)| a * b).sum();
    let oracle = decomp + gamma * expected_rank.powf(beta);
    let l = layer.loss(gamma, beta);
    assert!(close(l.total, oracle, 1e-10), "{} vs {oracle}", l.total);
    assert!(close(l.decomposition, decomp, 1e-10));
}

fn fd_check(layer: &SuperLayer, gamma: f64, beta: f64) -> f64 {
    let g = layer.flat_gradient(gamma, beta);
    let x0 = layer.params();
    let h = 1e-5;
    let mut scratch = layer.clone();
    let mut worst: f64 = 0.0;
    let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for i in 0..x0.len() {
        let mut x = x0.clone();
        x[i] = x0[i] + h;
        scratch.set_params(&x).unwrap();
        let up = scratch.loss(gamma, beta).total;
        x[i] = x0[i] - h;
        scratch.set_params(&x).unwrap();
        let down = scratch.loss(gamma, beta).total;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / g[i].abs().max(1e-2 * scale));
    }
    worst
}

#[test]
fn cp_superlayer_gradient_matches_finite_differences() {
    let w = random_tensor(vec![4, 4, 3, 3], 4);
    let mut layer = SuperLayer::new(w, DecompKind::Cp, &[2, 3, 5], 1.0, 7).unwrap();
    let mut alphas = layer.params();
    let n = alphas.len();
    alphas[n - 3..].copy_from_slice(&[0.3, -0.5, 0.1]);
    layer.set_params(&alphas).unwrap();
    let err = fd_check(&layer, 0.2, 0.6);
    assert!(err < 1e-4, "worst relative deviation {err}");
}

#[test]
fn tt_superlayer_gradient_matches_finite_differences() {
    let kernel = ConvKernel::new(random_tensor(vec![4, 4, 3, 3], 5)).unwrap();
    let target = DecompKind::Tt.target(&kernel);
    let mut layer = SuperLayer::new(target, DecompKind::Tt, &[1, 2, 3], 1.0, 8).unwrap();
    let mut x = layer.params();
    let n = x.len();
    x[n - 3..].copy_from_slice(&[-0.2, 0.4, 0.0]);
    layer.set_params(&x).unwrap();
    let err = fd_check(&layer, 0.5, 0.6);
    assert!(err < 1e-4, "worst relative deviation {err}");
}

#[test]
fn rank_term_does_not_touch_factor_gradients() {
    let w = random_tensor(vec![4, 4, 3, 3], 6);
    let layer = SuperLayer::new(w, DecompKind::Cp, &[2, 4], 1.0, 1).unwrap();
    let a = layer.gradient(0.0, 0.6);
    let b = layer.gradient(3.0, 0.6);
    assert_eq!(a.factors, b.factors);
    assert_ne!(a.alphas, b.alphas);
}

#[test]
fn single_candidate_step_equals_decompose_step() {
    let w = random_tensor(vec![4, 4, 3, 3], 9);
    for (kind, r) in [(DecompKind::Cp, 3), (DecompKind::Tt, 2)] {
        let target = if kind == DecompKind::Tt { DecompKind::Tt.target(&ConvKernel::new(w.clone()).unwrap()) } else { w.clone() };
        let cfg = DecomposeConfig { iterations: 1, cosine: false, seed: 4, ..Default::default() };
        let reference = decompose_sgd(&target, &kind.rank_spec(r, target.order()), &cfg).unwrap();
        let mut layer = SuperLayer::new(target.clone(), kind, &[r], 1.0, 4).unwrap();
        let before = layer.update_weights(0.2, 0.6, cfg.learning_rate, cfg.momentum).unwrap();
        assert_eq!(before.decomposition, reference.losses[0]);
        let got = layer.candidates()[0].factors.blocks();
        for (a, b) in got.iter().flatten().zip(reference.factors.blocks().iter().flatten()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}

#[test]
fn symmetric_candidates_stay_uniform() {
    let f = random_cp(&[4, 4, 3, 3], 3, 11);
    let w = random_tensor(vec![4, 4, 3, 3], 12);
    let mut layer = SuperLayer::from_candidates(w, vec![exact_candidate(&f, 0.0), exact_candidate(&f, 0.0)]).unwrap();
    let g = layer.gradient(0.2, 0.6);
    assert_eq!(g.alphas[0], g.alphas[1]);
    for _ in 0..5 {
        layer.step(0.2, 0.6, 0.1, 0.1, 0.9).unwrap();
    }
    let p = layer.probabilities();
    assert_eq!(p[0], p[1]);
}

#[test]
fn rank_pressure_favors_the_smaller_of_two_exact_fits() {
    let small = random_cp(&[4, 4, 3, 3], 10, 13);
    let mut padded: Vec<Vec<f64>> = Vec::new();
    for (n, &d) in [4usize, 4, 3, 3].iter().enumerate() {
        let mut m = vec![0.0; d * 100];
        for i in 0..d {
            m[i * 100..i * 100 + 10].copy_from_slice(&small.factor(n)[i * 10..(i + 1) * 10]);
        }
        padded.push(m);
    }
    let big = rankfit_core::decomposition::CpFactors::new(vec![4, 4, 3, 3], 100, padded).unwrap();
    let w = small.reconstruct();
    let mut layer = SuperLayer::from_candidates(w, vec![exact_candidate(&small, 0.0), exact_candidate(&big, 0.0)]).unwrap();
    let g = layer.gradient(0.2, 0.6);
    assert!(g.alphas[0] < 0.0 && g.alphas[1] > 0.0);
    layer.update_alphas(0.2, 0.6, 0.1, 0.9).unwrap();
    assert!(layer.probabilities()[0] > 0.5);
}

#[test]
fn select_rank_examples() {
    assert_eq!(select_rank(&[10, 20, 30], &[0.1, 0.9, 0.3]), 20);
    assert_eq!(select_rank(&[10, 20, 30], &[0.5, 0.5, 0.5]), 10);
    assert_eq!(select_rank(&[30, 20, 10], &[0.5, 0.5, 0.5]), 10);
    assert_eq!(select_rank(&[10, 20, 30], &[5.1, 5.9, 5.3]), 20);
}

#[test]
fn refinement_reproduces_the_worked_trace() {
    let wide = [(1, 10_000)];
    let a = refine_search_space(&[200], 100, &wide).unwrap();
    assert_eq!((a.lower[0], a.upper[0], a.step), (150, 250, 10));
    let b = refine_search_space(&[240], a.step, &wide).unwrap();
    assert_eq!((b.lower[0], b.upper[0], b.step), (235, 245, 1));
}

#[test]
fn refinement_clamps_near_the_lower_limit() {
    let r = refine_search_space(&[3], 10, &[(1, 72)]).unwrap();
    assert_eq!((r.lower[0], r.upper[0], r.step), (1, 8, 1));
}

#[test]
fn refinement_keeps_divisibility_after_clamping() {
    let r = refine_search_space(&[95], 100, &[(1, 120)]).unwrap();
    assert_eq!((r.lower[0], r.upper[0], r.step), (45, 115, 10));
    let r = refine_search_space(&[60], 50, &[(50, 64)]).unwrap();
    assert_eq!((r.lower[0], r.upper[0], r.step), (50, 60, 5));
}

fn quick(iters: usize) -> SearchConfig {
    SearchConfig { iterations_per_phase: iters, ..Default::default() }
}

#[test]
fn singleton_space_returns_its_rank() {
    let model = vec![planted_kernel([4, 4, 3, 3], 2, 1), planted_kernel([4, 4, 3, 3], 3, 2)];
    let space = SearchSpace { lower: vec![5, 7], upper: vec![5, 7], step: 10 };
    let report = run_search(&model, DecompKind::Cp, &space, &quick(20)).unwrap();
    assert_eq!(report.selected_ranks, vec![5, 7]);
    assert_eq!(report.phases.len(), 1);
}

#[test]
fn identical_layers_select_identical_ranks() {
    let k = planted_kernel([6, 6, 3, 3], 4, 3);
    let model = vec![k.clone(), k];
    let report = run_search(&model, DecompKind::Cp, &SearchSpace::uniform(2, 2, 12, 2), &quick(60)).unwrap();
    assert_eq!(report.selected_ranks[0], report.selected_ranks[1]);
    assert_eq!(report.phases[0].rank_sets[0], vec![2, 4, 6, 8, 10, 12]);
    assert_eq!(report.phases.len(), 2);
    assert_eq!(report.phases[1].step, 1);
}

#[test]
fn search_with_one_candidate_traces_decompose_bitwise() {
    let k = ConvKernel::new(random_tensor(vec![5, 4, 3, 3], 14)).unwrap();
    for kind in [DecompKind::Cp, DecompKind::Tt] {
        let cfg = SearchConfig { gamma: 0.0, iterations_per_phase: 80, seed: 21, ..Default::default() };
        let report = run_search(std::slice::from_ref(&k), kind, &SearchSpace::uniform(1, 3, 3, 1), &cfg).unwrap();
        let target = kind.target(&k);
        let reference = decompose_sgd(&target, &kind.rank_spec(3, target.order()), &cfg.decompose_config()).unwrap();
        let trace = &report.phases[0].total_loss;
        assert_eq!(trace.len(), reference.losses.len());
        for (a, b) in trace.iter().zip(&reference.losses) {
            assert_eq!(a.to_bits(), b.to_bits(), "{kind}");
        }
    }
}

#[test]
fn probabilities_stay_normalized_and_loss_dominates_rank_term() {
    let w = random_tensor(vec![5, 5, 3, 3], 15);
    let mut layer = SuperLayer::new(w, DecompKind::Cp, &[2, 4, 6, 8], 1.0, 3).unwrap();
    for t in 0..100 {
        let l = layer.step(0.5, 0.6, 0.1, 0.2, 0.9).unwrap();
        let s: f64 = layer.probabilities().iter().sum();
        assert!((s - 1.0).abs() <= 1e-12, "iteration {t}: {s}");
        assert!(l.total >= 0.5 * l.rank && l.rank >= 0.0);
    }
}

#[test]
fn selected_ranks_stay_in_initial_bounds() {
    let model = vec![planted_kernel([6, 6, 3, 3], 5, 30), planted_kernel([7, 5, 3, 3], 9, 31)];
    let space = SearchSpace { lower: vec![3, 20], upper: vec![23, 40], step: 10 };
    let report = run_search(&model, DecompKind::Cp, &space, &quick(40)).unwrap();
    for (i, &sr) in report.selected_ranks.iter().enumerate() {
        assert!(sr >= space.lower[i] && sr <= space.upper[i], "layer {i}: {sr}");
    }
    for ph in &report.phases {
        for (i, set) in ph.rank_sets.iter().enumerate() {
            assert!(set.iter().all(|&r| r >= space.lower[i] && r <= space.upper[i]));
        }
    }
}

#[test]
fn upper_bound_is_lowered_to_the_rank_cap() {
    // CP cap of (4, 3, 3, 3) is 27.
    let model = vec![planted_kernel([4, 3, 3, 3], 2, 40)];
    let report = run_search(&model, DecompKind::Cp, &SearchSpace::uniform(1, 10, 100, 10), &quick(5)).unwrap();
    assert_eq!(report.phases[0].rank_sets[0], vec![10, 20]);
    let err = run_search(&model, DecompKind::Cp, &SearchSpace::uniform(1, 30, 100, 10), &quick(5));
    assert!(matches!(err, Err(Error::InvalidBounds(_))));
}

#[test]
fn final_decompose_examples() {
    let planted = planted_kernel([8, 8, 3, 3], 4, 100);
    let zero = ConvKernel::new(DenseTensor::zeros(vec![8, 8, 3, 3]).unwrap()).unwrap();
    let full = ConvKernel::new(random_tensor(vec![8, 8, 3, 3], 41)).unwrap();
    let cfg = DecomposeConfig { iterations: 2000, ..Default::default() };
    let out = final_decompose(&[planted, zero, full], DecompKind::Cp, &[4, 4, 72], &cfg).unwrap();
    assert!(out[0].relative_error <= 1e-2, "planted {}", out[0].relative_error);
    assert_eq!(out[1].relative_error, 0.0);
    assert!(out[2].relative_error <= 1e-3, "cap {}", out[2].relative_error);
    assert!(final_decompose(&[planted_kernel([4, 4, 3, 3], 2, 1)], DecompKind::Cp, &[], &cfg).is_err());
}

#[test]
fn search_initializes_candidates_like_single_fits() {
    let w = random_tensor(vec![4, 4, 3, 3], 16);
    let layer = SuperLayer::new(w.clone(), DecompKind::Cp, &[2, 5], 1.3, 99).unwrap();
    let f = init::initial_factors(&w, &RankSpec::Cp(5), 1.3, 99).unwrap();
    assert_eq!(layer.candidates()[1].factors, f);
    assert!(rel_err(&layer.candidates()[1].factors.reconstruct(), &f.reconstruct()) == 0.0);
}

#[test]
fn larger_gamma_never_selects_a_larger_rank_among_equal_fits() {
    // Every candidate reconstructs the same tensor, so only the rank term separates them.
    let f = random_cp(&[4, 4, 3, 3], 3, 50);
    let w = random_tensor(vec![4, 4, 3, 3], 51);
    let ranks = [10, 20, 30, 40];
    let mut previous = usize::MAX;
    for gamma in [0.0, 0.02, 0.2, 2.0, 20.0] {
        let cands = ranks
            .iter()
            .enumerate()
            .map(|(i, &r)| RankCandidate { rank: r, factors: Factors::Cp(f.clone()), alpha: 0.1 * (i as f64 % 2.0) })
            .collect();
        let mut layer = SuperLayer::from_candidates(w.clone(), cands).unwrap();
        for _ in 0..50 {
            layer.update_alphas(gamma, 0.6, 0.1, 0.9).unwrap();
        }
        let sr = layer.select_rank();
        assert!(sr <= previous, "gamma {gamma}: {sr} after {previous}");
        previous = sr;
    }
    assert_eq!(previous, 10);
}

#[test]
fn tt_cap_comes_from_the_grouped_view() {
    // (6, 5, 3, 3) is searched through its (6, 9, 5) view, whose bonds cap at 5.
    let model = vec![ConvKernel::new(random_tensor(vec![6, 5, 3, 3], 60)).unwrap()];
    let report = run_search(&model, DecompKind::Tt, &SearchSpace::uniform(1, 1, 9, 2), &quick(3)).unwrap();
    assert_eq!(report.phases[0].rank_sets[0], vec![1, 3, 5]);
}
