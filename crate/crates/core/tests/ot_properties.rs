mod common;

use common::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sigrot::numerics::generalized_kl;
use sigrot::ot::*;
use sigrot::DenseMatrix;

fn small_eps_cfg() -> SolverConfig {
    SolverConfig {
        max_iters: 200_000,
        tolerance: 1e-10,
        ..SolverConfig::balanced(1e-3)
    }
}

#[test]
fn lp_oracle_on_hand_instance() {
    // identity-like cost: the diagonal assignment is free
    let c = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert_eq!(exact_ot_cost(&c, &[0.5, 0.5], &[0.5, 0.5]), 0.0);
    let c = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
    assert!((exact_ot_cost(&c, &[1.0], &[0.25, 0.75]) - 1.75).abs() < 1e-15);
}

#[test]
fn small_epsilon_cost_matches_exact_lp() {
    let mut r = rng(100);
    for _ in 0..5 {
        let c = random_matrix(&mut r, 4, 5, 0.0, 1.0);
        let p = sinkhorn_balanced(&c, &uniform(4), &uniform(5), &small_eps_cfg()).unwrap();
        let entropic = transport_cost(&p.plan, &c).unwrap();
        let exact = exact_ot_cost(&c, &uniform(4), &uniform(5));
        assert!(
            (entropic - exact).abs() <= 0.01 * exact,
            "{entropic} vs {exact}"
        );
    }
}

#[test]
fn cost_decreases_toward_lp_as_epsilon_shrinks() {
    let mut r = rng(101);
    let c = random_matrix(&mut r, 4, 5, 0.0, 1.0);
    let exact = exact_ot_cost(&c, &uniform(4), &uniform(5));
    let mut prev = f64::INFINITY;
    for eps in [0.5, 0.1, 0.02, 0.004] {
        let cfg = SolverConfig {
            max_iters: 200_000,
            tolerance: 1e-12,
            ..SolverConfig::balanced(eps)
        };
        let p = sinkhorn_balanced(&c, &uniform(4), &uniform(5), &cfg).unwrap();
        let cost = transport_cost(&p.plan, &c).unwrap();
        assert!(cost < prev, "eps {eps}: {cost} !< {prev}");
        assert!(cost >= exact - 1e-9);
        prev = cost;
    }
    assert!((prev - exact) / exact < 0.05);
}

#[test]
fn balanced_plan_is_positive_and_residuals_shrink() {
    let mut r = rng(102);
    for _ in 0..5 {
        let c = random_matrix(&mut r, 6, 7, 0.0, 1.0);
        let cfg = SolverConfig {
            tolerance: 1e-13,
            max_iters: 5000,
            ..SolverConfig::balanced(0.05)
        };
        let p = sinkhorn_balanced(&c, &uniform(6), &uniform(7), &cfg).unwrap();
        assert!(p.plan.data().iter().all(|&x| x > 0.0));
        let h = &p.residual_history;
        assert!(h.len() >= 10);
        let picks: Vec<usize> = (0..10).map(|s| s * (h.len() - 1) / 9).collect();
        for w in picks.windows(2) {
            assert!(
                h[w[1]] <= h[w[0]] + 1e-15,
                "residual rose at {w:?}: {} -> {}",
                h[w[0]],
                h[w[1]]
            );
        }
    }
}

#[test]
fn symmetric_cost_gives_symmetric_plan() {
    let mut r = rng(103);
    let a = random_matrix(&mut r, 6, 6, 0.0, 1.0);
    let c = DenseMatrix::from_fn(6, 6, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let p = sinkhorn_balanced(&c, &uniform(6), &uniform(6), &SolverConfig::balanced(0.05)).unwrap();
    assert!(p.plan.max_abs_diff(&p.plan.transpose()) <= 1e-8);
}

#[test]
fn large_tau_recovers_balanced_marginals_and_plan() {
    let mut r = rng(104);
    for _ in 0..5 {
        let c = random_matrix(&mut r, 8, 8, 0.0, 1.0);
        let mu = uniform(8);
        let cfg = SolverConfig {
            max_iters: 50_000,
            ..SolverConfig::unbalanced(0.05, 1e4, 1e4)
        };
        let p = sinkhorn_unbalanced(&c, &mu, &mu, &cfg).unwrap();
        let rows: f64 = p
            .plan
            .row_sums()
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b).abs())
            .sum();
        let cols: f64 = p
            .plan
            .col_sums()
            .iter()
            .zip(&mu)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(rows <= 1e-3 && cols <= 1e-3, "{rows} {cols}");
        let b = sinkhorn_balanced(&c, &mu, &mu, &SolverConfig::balanced(0.05)).unwrap();
        let l1: f64 = p
            .plan
            .data()
            .iter()
            .zip(b.plan.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(l1 <= 1e-3, "plan distance {l1}");
    }
}

fn uot_objective(
    plan: &DenseMatrix,
    c: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    eps: f64,
    t1: f64,
    t2: f64,
) -> f64 {
    let mut lin = 0.0;
    let mut neg_entropy = 0.0;
    for (g, cc) in plan.data().iter().zip(c.data()) {
        lin += g * cc;
        neg_entropy += g * (g.ln() - 1.0);
    }
    lin + eps * neg_entropy
        + t1 * generalized_kl(&plan.row_sums(), mu).unwrap()
        + t2 * generalized_kl(&plan.col_sums(), nu).unwrap()
}

#[test]
fn scalar_unbalanced_problem_matches_grid_search() {
    for &c in &[0.0, 0.3, 1.0, 1.7] {
        let cost = DenseMatrix::from_rows(&[vec![c]]).unwrap();
        let cfg = SolverConfig::unbalanced(0.05, 0.5, 0.5);
        let p = sinkhorn_unbalanced(&cost, &[1.0], &[1.0], &cfg).unwrap();
        let obj = |g: f64| {
            let kl = g * g.ln() - g + 1.0;
            c * g + 0.05 * (g * g.ln() - g) + 0.5 * kl + 0.5 * kl
        };
        let (mut best_g, mut best) = (0.0, f64::INFINITY);
        let mut g = 1e-6;
        while g <= 3.0 {
            let v = obj(g);
            if v < best {
                best = v;
                best_g = g;
            }
            g += 1e-6;
        }
        assert!(
            (p.plan.get(0, 0) - best_g).abs() <= 2e-6,
            "c={c}: {} vs {best_g}",
            p.plan.get(0, 0)
        );
    }
}

#[test]
fn unbalanced_plan_is_a_local_minimum() {
    let mut r = rng(105);
    let c = random_matrix(&mut r, 5, 5, 0.0, 1.0);
    let mu = uniform(5);
    let (eps, tau) = (0.05, 0.5);
    let cfg = SolverConfig {
        tolerance: 1e-12,
        max_iters: 10_000,
        ..SolverConfig::unbalanced(eps, tau, tau)
    };
    let p = sinkhorn_unbalanced(&c, &mu, &mu, &cfg).unwrap();
    assert!(p.converged);
    let base = uot_objective(&p.plan, &c, &mu, &mu, eps, tau, tau);
    for _ in 0..1000 {
        let perturbed = DenseMatrix::from_fn(5, 5, |i, j| {
            let z: f64 = StandardNormal.sample(&mut r);
            p.plan.get(i, j) * (1e-2 * z).exp()
        });
        assert!(uot_objective(&perturbed, &c, &mu, &mu, eps, tau, tau) >= base);
    }
}

fn fixed_cfg(mode: SolverMode) -> SolverConfig {
    SolverConfig {
        max_iters: 100,
        early_stop: false,
        mode,
        ..SolverConfig::default()
    }
}

#[test]
fn backward_matches_finite_differences_linear_loss() {
    let mut r = rng(106);
    for mode in [SolverMode::Balanced, SolverMode::Unbalanced] {
        let c = random_matrix(&mut r, 3, 3, 0.0, 1.0);
        let w = random_matrix(&mut r, 3, 3, -1.0, 1.0);
        let cfg = fixed_cfg(mode);
        let mu = uniform(3);
        let p = sinkhorn_with_tape(&c, &mu, &mu, &cfg).unwrap();
        let grad = sinkhorn_backward(&p, &w).unwrap();
        let fd = finite_difference(&c, 1e-6, |cc| {
            let q = sinkhorn_with_tape(cc, &mu, &mu, &cfg).unwrap();
            transport_cost(&q.plan, &w).unwrap()
        });
        let err = max_relative_error(&grad, &fd);
        assert!(err < 1e-4, "{mode:?}: {err}\n{grad:?}\n{fd:?}");
    }
}

#[test]
fn backward_matches_finite_differences_kl_loss() {
    let mut r = rng(107);
    let n = 4;
    let target: Vec<f64> = (0..n * n).map(|_| r.random_range(0.05..0.5)).collect();
    let mu = uniform(n);
    let loss = |plan: &DenseMatrix| {
        let scaled: Vec<f64> = plan.data().iter().map(|g| g * n as f64).collect();
        generalized_kl(&scaled, &target).unwrap()
    };
    for eps in [0.05, 0.009, 0.005] {
        let c = random_matrix(&mut r, n, n, 0.0, 1.0);
        let cfg = SolverConfig {
            epsilon: eps,
            ..fixed_cfg(SolverMode::Unbalanced)
        };
        let p = sinkhorn_with_tape(&c, &mu, &mu, &cfg).unwrap();
        assert_eq!(p.log_domain, eps < 0.01);
        let upstream = DenseMatrix::from_fn(n, n, |i, j| {
            n as f64 * (n as f64 * p.plan.get(i, j) / target[i * n + j]).ln()
        });
        let grad = sinkhorn_backward(&p, &upstream).unwrap();
        let fd = finite_difference(&c, 1e-6, |cc| {
            loss(&sinkhorn_with_tape(cc, &mu, &mu, &cfg).unwrap().plan)
        });
        let err = max_relative_error(&grad, &fd);
        assert!(err < 1e-4, "eps {eps}: {err}");
    }
}
