#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use sigrot::graph::{build_graph, CombinationStrategy, GraphEmbeddings, SimilarityGraph};
use sigrot::losses::*;
use sigrot::numerics::{generalized_kl, row_softmax};
use sigrot::ot::{sinkhorn_balanced, SolverConfig};
use sigrot::DenseMatrix;

const H: f64 = 1e-6;

fn random_graph(seed: u64, n: usize) -> SimilarityGraph {
    let mut r = rng(seed);
    let t = random_unit_rows(&mut r, n, 6);
    let i = random_unit_rows(&mut r, n, 6);
    build_graph(
        &GraphEmbeddings::new(t, i).unwrap(),
        CombinationStrategy::CrossModality,
    )
    .unwrap()
}

/// Checks every gradient of `loss` against central differences.
fn check_gradients(
    batch: &ModelBatch,
    params: ScaleParams,
    loss: impl Fn(&ModelBatch, &ScaleParams) -> LossOutput,
) -> f64 {
    let out = loss(batch, &params);
    let fd_img = finite_difference(&batch.image, H, |m| {
        loss(
            &ModelBatch::raw(m.clone(), batch.text.clone()).unwrap(),
            &params,
        )
        .value
    });
    let fd_txt = finite_difference(&batch.text, H, |m| {
        loss(
            &ModelBatch::raw(batch.image.clone(), m.clone()).unwrap(),
            &params,
        )
        .value
    });
    let scalars = DenseMatrix::from_vec(1, 2, vec![params.tau_prime, params.bias]).unwrap();
    let fd_scalar = finite_difference(&scalars, H, |m| {
        loss(
            batch,
            &ScaleParams {
                tau_prime: m.get(0, 0),
                bias: m.get(0, 1),
            },
        )
        .value
    });
    let analytic_scalar =
        DenseMatrix::from_vec(1, 2, vec![out.grad_tau_prime, out.grad_bias]).unwrap();
    max_relative_error(&out.grad_image, &fd_img)
        .max(max_relative_error(&out.grad_text, &fd_txt))
        .max(max_relative_error(&analytic_scalar, &fd_scalar))
}

fn batch(seed: u64, n: usize) -> ModelBatch {
    let mut r = rng(seed);
    ModelBatch::new(
        random_unit_rows(&mut r, n, 5),
        random_unit_rows(&mut r, n, 5),
    )
    .unwrap()
}

#[test]
fn clip_gradient_matches_finite_differences() {
    let p = ScaleParams {
        tau_prime: 0.2f64.ln(),
        bias: 0.0,
    };
    let err = check_gradients(&batch(1, 5), p, |b, p| clip_loss(b, p).unwrap());
    assert!(err < 1e-5, "{err}");
}

#[test]
fn siglip_gradient_matches_finite_differences() {
    let p = ScaleParams {
        tau_prime: 0.3f64.ln(),
        bias: -1.5,
    };
    let err = check_gradients(&batch(2, 4), p, |b, p| siglip_loss(b, p).unwrap());
    assert!(err < 1e-5, "{err}");
}

#[test]
fn sigrot_gradient_matches_finite_differences() {
    let cfg = SolverConfig::training();
    for (seed, n) in [(3, 3), (4, 5)] {
        let g = random_graph(seed + 10, n);
        let err = check_gradients(&batch(seed, n), ScaleParams::clip_init(), |b, _| {
            sigrot_loss(b, &g, &cfg).unwrap()
        });
        assert!(err < 1e-4, "n={n}: {err}");
    }
}

#[test]
fn hybrid_gradients_match_finite_differences() {
    let cfg = SolverConfig::training();
    let g = random_graph(20, 4);
    for kind in [Contrastive::Clip, Contrastive::Siglip] {
        let p = ScaleParams {
            tau_prime: 0.25f64.ln(),
            bias: -2.0,
        };
        let err = check_gradients(&batch(21, 4), p, |b, p| {
            hybrid_loss(b, &g, p, &cfg, 0.1, kind).unwrap()
        });
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn hybrid_reduces_to_parts() {
    let cfg = SolverConfig::training();
    let g = random_graph(30, 6);
    let b = batch(31, 6);
    let p = ScaleParams::clip_init();
    let ot = sigrot_loss(&b, &g, &cfg).unwrap();
    let zero = hybrid_loss(&b, &g, &p, &cfg, 0.0, Contrastive::Clip).unwrap();
    assert_eq!(zero.value.to_bits(), ot.value.to_bits());
    assert_eq!(zero.grad_image.data(), ot.grad_image.data());
    assert_eq!(zero.grad_text.data(), ot.grad_text.data());

    let c = clip_loss(&b, &p).unwrap();
    let mixed = hybrid_loss(&b, &g, &p, &cfg, 0.1, Contrastive::Clip).unwrap();
    assert!((mixed.value - (0.1 * c.value + ot.value)).abs() < 1e-12);

    let one = hybrid_loss(&b, &g, &p, &cfg, 1.0, Contrastive::Clip).unwrap();
    let two = hybrid_loss(&b, &g, &p, &cfg, 2.0, Contrastive::Clip).unwrap();
    let mut diff = two.grad_image.clone();
    diff.add_scaled(&one.grad_image, -1.0).unwrap();
    assert!(diff.max_abs_diff(&c.grad_image) < 1e-10);
    assert!((two.grad_tau_prime - one.grad_tau_prime - c.grad_tau_prime).abs() < 1e-10);
}

/// Straight-line reimplementation: plain scaling iterations and explicit
/// loops, no shared kernels.
fn naive_sigrot(
    zi: &DenseMatrix,
    zt: &DenseMatrix,
    graph: &DenseMatrix,
    eps: f64,
    tau: f64,
    iters: usize,
) -> f64 {
    let n = zi.rows();
    let d = zi.cols();
    let mut sim = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            for k in 0..d {
                sim[a][b] += zi.get(a, k) * zt.get(b, k);
            }
        }
    }
    let mut target = vec![vec![0.0; n]; n];
    for a in 0..n {
        let z: f64 = (0..n).map(|b| graph.get(a, b).exp()).sum();
        for b in 0..n {
            target[a][b] = graph.get(a, b).exp() / z;
        }
    }
    let solve = |cost: &dyn Fn(usize, usize) -> f64| -> Vec<Vec<f64>> {
        let k: Vec<Vec<f64>> = (0..n)
            .map(|a| (0..n).map(|b| (-cost(a, b) / eps).exp()).collect())
            .collect();
        let rho = tau / (tau + eps);
        let m = 1.0 / n as f64;
        let (mut u, mut v) = (vec![1.0; n], vec![1.0; n]);
        for _ in 0..iters {
            for a in 0..n {
                let kv: f64 = (0..n).map(|b| k[a][b] * v[b]).sum();
                u[a] = (m / kv).powf(rho);
            }
            for b in 0..n {
                let ku: f64 = (0..n).map(|a| k[a][b] * u[a]).sum();
                v[b] = (m / ku).powf(rho);
            }
        }
        (0..n)
            .map(|a| (0..n).map(|b| u[a] * k[a][b] * v[b]).collect())
            .collect()
    };
    let i2t = solve(&|a, b| 1.0 - sim[a][b]);
    let t2i = solve(&|a, b| 1.0 - sim[b][a]);
    let kl = |plan: &Vec<Vec<f64>>| -> f64 {
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                let p = n as f64 * plan[a][b];
                s += p * (p / target[a][b]).ln() - p + target[a][b];
            }
        }
        s / n as f64
    };
    0.5 * (kl(&i2t) + kl(&t2i))
}

#[test]
fn sigrot_matches_straight_line_implementation() {
    // three clustered pairs: two share a concept, the third is apart
    let zi = DenseMatrix::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.8, 0.6, 0.0],
        vec![0.0, 0.0, 1.0],
    ])
    .unwrap();
    let zt = DenseMatrix::from_rows(&[
        vec![0.96, 0.28, 0.0],
        vec![0.6, 0.8, 0.0],
        vec![0.0, 0.6, 0.8],
    ])
    .unwrap();
    let e = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let g = build_graph(
        &GraphEmbeddings::new(e.clone(), e).unwrap(),
        CombinationStrategy::CrossModality,
    )
    .unwrap();
    let cfg = SolverConfig::training();
    let b = ModelBatch::new(zi.clone(), zt.clone()).unwrap();
    let ours = sigrot_loss(&b, &g, &cfg).unwrap().value;
    let theirs = naive_sigrot(&zi, &zt, &g.graph, cfg.epsilon, cfg.tau1, cfg.max_iters);
    assert!((ours - theirs).abs() < 1e-8, "{ours} vs {theirs}");
}

#[test]
fn sigrot_vanishes_when_target_is_own_plan() {
    let mut r = rng(40);
    let z = random_unit_rows(&mut r, 5, 4);
    let b = ModelBatch::new(z.clone(), z.clone()).unwrap();
    let s = similarity_logits(&b);
    let cost = DenseMatrix::from_fn(5, 5, |i, j| 1.0 - s.get(i, j));
    let cfg = SolverConfig {
        tolerance: 1e-14,
        max_iters: 20_000,
        ..SolverConfig::balanced(0.05)
    };
    let plan = sinkhorn_balanced(&cost, &uniform(5), &uniform(5), &cfg).unwrap();
    // a graph whose softmax is the row-normalized plan
    let graph = DenseMatrix::from_fn(5, 5, |i, j| (5.0 * plan.plan.get(i, j)).ln());
    let target = row_softmax(&graph);
    let sg = SimilarityGraph {
        graph,
        target,
        strategy: CombinationStrategy::CrossModality,
    };
    let out = sigrot_loss(&b, &sg, &cfg).unwrap();
    assert!(out.value < 1e-6, "{}", out.value);
    assert!(out.value >= 0.0);
    // and positive for a mismatched target
    let other = random_graph(41, 5);
    assert!(sigrot_loss(&b, &other, &cfg).unwrap().value > 1e-3);
    let _ = generalized_kl(&[1.0], &[1.0]);
}

#[test]
fn sigrot_is_permutation_invariant() {
    let cfg = SolverConfig::training();
    let mut r = rng(50);
    let t = random_unit_rows(&mut r, 6, 4);
    let i = random_unit_rows(&mut r, 6, 4);
    let emb = GraphEmbeddings::new(t, i).unwrap();
    let b = batch(51, 6);
    let order = [4, 2, 0, 5, 1, 3];
    let v1 = sigrot_loss(
        &b,
        &build_graph(&emb, CombinationStrategy::CrossModality).unwrap(),
        &cfg,
    )
    .unwrap()
    .value;
    let v2 = sigrot_loss(
        &b.permuted(&order),
        &build_graph(&emb.permuted(&order), CombinationStrategy::CrossModality).unwrap(),
        &cfg,
    )
    .unwrap()
    .value;
    assert!((v1 - v2).abs() < 1e-10, "{v1} vs {v2}");
}
