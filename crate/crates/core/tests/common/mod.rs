//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sigrot::DenseMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

/// Random matrix with unit-norm rows.
pub fn random_unit_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
    let mut m = random_matrix(rng, r, c, -1.0, 1.0);
    for i in 0..r {
        let n = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        m.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    m
}

/// Exact transportation LP by enumerating every basis of the transportation
/// polytope (spanning trees of the bipartite support graph) and solving each
/// by leaf elimination.
pub fn exact_ot_cost(cost: &DenseMatrix, mu: &[f64], nu: &[f64]) -> f64 {
    let (n, m) = cost.shape();
    let cells = n * m;
    let k = n + m - 1;
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..k).collect();
    'combos: loop {
        if let Some(c) = tree_cost(&idx, cost, mu, nu) {
            best = best.min(c);
        }
        let mut i = k;
        while i > 0 {
            i -= 1;
            if idx[i] < i + cells - k {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                continue 'combos;
            }
        }
        return best;
    }
}

fn tree_cost(edges: &[usize], cost: &DenseMatrix, mu: &[f64], nu: &[f64]) -> Option<f64> {
    let (n, m) = cost.shape();
    let nodes = n + m;
    let mut parent: Vec<usize> = (0..nodes).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let nx = p[y];
            p[y] = r;
            y = nx;
        }
        r
    }
    let ends: Vec<(usize, usize)> = edges.iter().map(|&e| (e / m, n + e % m)).collect();
    for &(a, b) in &ends {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return None;
        }
        parent[ra] = rb;
    }
    let mut remaining: Vec<f64> = mu.iter().chain(nu).copied().collect();
    let mut alive = vec![true; ends.len()];
    let mut degree = vec![0usize; nodes];
    for &(a, b) in &ends {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut total = 0.0;
    for _ in 0..ends.len() {
        let (e, leaf) = ends
            .iter()
            .enumerate()
            .filter(|(e, _)| alive[*e])
            .find_map(|(e, &(a, b))| {
                if degree[a] == 1 {
                    Some((e, a))
                } else if degree[b] == 1 {
                    Some((e, b))
                } else {
                    None
                }
            })?;
        let (a, b) = ends[e];
        let other = if leaf == a { b } else { a };
        let flow = remaining[leaf];
        if flow < -1e-12 {
            return None;
        }
        remaining[other] -= flow;
        remaining[leaf] = 0.0;
        alive[e] = false;
        degree[a] -= 1;
        degree[b] -= 1;
        total += flow * cost.get(a, b - n);
    }
    Some(total)
}

/// Central finite difference of `f` with respect to every entry of `x`.
pub fn finite_difference(
    x: &DenseMatrix,
    h: f64,
    mut f: impl FnMut(&DenseMatrix) -> f64,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest entrywise error `|a − n| / max(|a|, |n|, floor)` where the floor
/// is 1e-3 of the largest numeric entry, so entries many orders below the
/// gradient's scale are judged against that scale rather than against
/// finite-difference round-off.
pub fn max_relative_error(analytic: &DenseMatrix, numeric: &DenseMatrix) -> f64 {
    let floor = (1e-3 * numeric.max_abs()).max(1e-8);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
