//! Entropic optimal transport solvers.
//!
//! Both solvers alternate the classic scaling updates
//!
//! ```text
//! u ← (μ ⊘ K v)^ρ₁,   v ← (ν ⊘ Kᵀ u)^ρ₂,   K = exp(−C/ε)
//! ```
//!
//! with `ρ = 1` for the balanced problem and `ρ = τ/(τ+ε)` for the
//! KL-relaxed unbalanced problem. The plan is `diag(u) K diag(v)`.
//!
//! Iterations run on the scaling vectors directly when the kernel is well
//! inside the `f64` range, and on the log-potentials `f = ε log u`,
//! `g = ε log v` otherwise (small `ε`, or any underflowing kernel product).
//! Each forward pass can record its iterates so that
//! [`sinkhorn_backward`] can differentiate the exact unrolled computation.

use crate::error::{Error, Result};
use crate::numerics::{logsumexp_unchecked, DenseMatrix};

/// Below this entropic coefficient the solver always works in the log domain.
pub const LOG_DOMAIN_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverMode {
    Balanced,
    Unbalanced,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Entropic coefficient ε.
    pub epsilon: f64,
    /// Row-marginal relaxation τ₁ (unbalanced mode only).
    pub tau1: f64,
    /// Column-marginal relaxation τ₂ (unbalanced mode only).
    pub tau2: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub mode: SolverMode,
    /// Stop as soon as the residual drops below `tolerance`. When false the
    /// solver always runs `max_iters` iterations, which keeps the recorded
    /// tape the same shape from call to call.
    pub early_stop: bool,
}

impl Default for SolverConfig {
    /// ε = 0.05 and τ₁ = τ₂ = 0.5, run to convergence.
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            tau1: 0.5,
            tau2: 0.5,
            max_iters: 2000,
            tolerance: 1e-9,
            mode: SolverMode::Unbalanced,
            early_stop: true,
        }
    }
}

impl SolverConfig {
    /// The configuration used inside training: 100 fixed iterations.
    pub fn training() -> Self {
        Self {
            max_iters: 100,
            early_stop: false,
            ..Self::default()
        }
    }

    pub fn balanced(epsilon: f64) -> Self {
        Self {
            epsilon,
            mode: SolverMode::Balanced,
            ..Self::default()
        }
    }

    pub fn unbalanced(epsilon: f64, tau1: f64, tau2: f64) -> Self {
        Self {
            epsilon,
            tau1,
            tau2,
            mode: SolverMode::Unbalanced,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        positive("epsilon", self.epsilon)?;
        positive("tau1", self.tau1)?;
        positive("tau2", self.tau2)?;
        positive("tolerance", self.tolerance)?;
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be at least 1".into()));
        }
        Ok(())
    }

    /// Scaling exponents `(ρ₁, ρ₂)`.
    fn exponents(&self) -> (f64, f64) {
        match self.mode {
            SolverMode::Balanced => (1.0, 1.0),
            SolverMode::Unbalanced => (
                self.tau1 / (self.tau1 + self.epsilon),
                self.tau2 / (self.tau2 + self.epsilon),
            ),
        }
    }
}

/// Iterates recorded during a forward solve.
#[derive(Debug, Clone)]
struct SinkhornTape {
    epsilon: f64,
    rho1: f64,
    rho2: f64,
    iterates: Iterates,
}

#[derive(Debug, Clone)]
enum Iterates {
    /// Kernel plus `u⁽ᵏ⁾` for k = 1..=T and `v⁽ᵏ⁾` for k = 0..=T.
    Scaling {
        kernel: DenseMatrix,
        us: Vec<Vec<f64>>,
        vs: Vec<Vec<f64>>,
    },
    /// Cost plus `f⁽ᵏ⁾` for k = 1..=T and `g⁽ᵏ⁾` for k = 0..=T.
    Log {
        cost: DenseMatrix,
        fs: Vec<Vec<f64>>,
        gs: Vec<Vec<f64>>,
    },
}

/// A transport plan together with solver diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub plan: DenseMatrix,
    pub iterations_used: usize,
    /// Balanced: L1 distance of the row sums from μ. Unbalanced: L∞ change
    /// of `log u` over the final iteration.
    pub row_residual: f64,
    /// Balanced: L1 distance of the column sums from ν. Unbalanced: L∞
    /// change of `log v` over the final iteration.
    pub col_residual: f64,
    pub converged: bool,
    /// `max(row_residual, col_residual)` after each iteration. Only filled
    /// when the solver checks convergence (`early_stop`).
    pub residual_history: Vec<f64>,
    pub log_domain: bool,
    tape: Option<SinkhornTape>,
}

impl TransportPlan {
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    /// Drops the recorded iterates.
    pub fn detach(mut self) -> Self {
        self.tape = None;
        self
    }
}

/// Entropic OT with hard marginals.
pub fn sinkhorn_balanced(
    cost: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    cfg: &SolverConfig,
) -> Result<TransportPlan> {
    let cfg = SolverConfig {
        mode: SolverMode::Balanced,
        ..*cfg
    };
    check_marginal_mass(mu)?;
    check_marginal_mass(nu)?;
    solve(cost, mu, nu, &cfg, false)
}

/// Entropic OT with KL-relaxed marginals.
pub fn sinkhorn_unbalanced(
    cost: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    cfg: &SolverConfig,
) -> Result<TransportPlan> {
    let cfg = SolverConfig {
        mode: SolverMode::Unbalanced,
        ..*cfg
    };
    solve(cost, mu, nu, &cfg, false)
}

/// Runs the solver in `cfg.mode` and records the iterates for
/// [`sinkhorn_backward`].
pub fn sinkhorn_with_tape(
    cost: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    cfg: &SolverConfig,
) -> Result<TransportPlan> {
    if cfg.mode == SolverMode::Balanced {
        check_marginal_mass(mu)?;
        check_marginal_mass(nu)?;
    }
    solve(cost, mu, nu, cfg, true)
}

/// Frobenius inner product `⟨γ, C⟩`.
pub fn transport_cost(plan: &DenseMatrix, cost: &DenseMatrix) -> Result<f64> {
    if plan.shape() != cost.shape() {
        return Err(Error::DimensionMismatch(format!(
            "plan is {:?} but cost is {:?}",
            plan.shape(),
            cost.shape()
        )));
    }
    let mut s = 0.0;
    for (g, c) in plan.data().iter().zip(cost.data()) {
        s += g * c;
    }
    Ok(s)
}

fn check_marginal_mass(m: &[f64]) -> Result<()> {
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "balanced marginals must sum to 1, got {total}"
        )));
    }
    Ok(())
}

fn solve(
    cost: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    cfg: &SolverConfig,
    record: bool,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, m) = cost.shape();
    if mu.len() != n || nu.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "cost is {n}x{m} but marginals have lengths {} and {}",
            mu.len(),
            nu.len()
        )));
    }
    if n == 0 || m == 0 {
        return Err(Error::EmptyInput("sinkhorn"));
    }
    for (index, &value) in mu.iter().chain(nu).enumerate() {
        if !(value > 0.0) || !value.is_finite() {
            let index = if index < n { index } else { index - n };
            return Err(Error::NonPositiveMarginal { index, value });
        }
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if cfg.epsilon >= LOG_DOMAIN_EPSILON {
        if let Some(plan) = solve_scaling(cost, mu, nu, cfg, record) {
            return Ok(plan);
        }
    }
    Ok(solve_log(cost, mu, nu, cfg, record))
}

struct Progress {
    iterations: usize,
    row_residual: f64,
    col_residual: f64,
    converged: bool,
    history: Vec<f64>,
}

/// Scaling-vector iterations. Returns `None` when any kernel product
/// underflows or overflows, in which case the caller falls back to the log
/// domain.
fn solve_scaling(
    cost: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    cfg: &SolverConfig,
    record: bool,
) -> Option<TransportPlan> {
    let (n, m) = cost.shape();
    let eps = cfg.epsilon;
    let (rho1, rho2) = cfg.exponents();
    let kernel = DenseMatrix::from_fn(n, m, |i, j| (-cost.get(i, j) / eps).exp());
    if kernel.data().iter().any(|&k| k == 0.0 || !k.is_finite()) {
        return None;
    }

    let mut u = vec![1.0f64; n];
    let mut v = vec![1.0f64; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    let (mut us, mut vs) = (Vec::new(), Vec::new());
    if record {
        vs.push(v.clone());
    }
    let check = cfg.early_stop;
    let mut progress = Progress {
        iterations: 0,
        row_residual: f64::INFINITY,
        col_residual: f64::INFINITY,
        converged: false,
        history: Vec::new(),
    };

    for it in 1..=cfg.max_iters {
        matvec(&kernel, &v, &mut kv);
        let mut du: f64 = 0.0;
        for i in 0..n {
            let next = pow_ratio(mu[i], kv[i], rho1);
            du = du.max((next.ln() - u[i].ln()).abs());
            u[i] = next;
        }
        matvec_t(&kernel, &u, &mut ktu);
        let mut dv: f64 = 0.0;
        for j in 0..m {
            let next = pow_ratio(nu[j], ktu[j], rho2);
            dv = dv.max((next.ln() - v[j].ln()).abs());
            v[j] = next;
        }
        if !u.iter().chain(&v).all(|x| x.is_finite() && *x > 0.0) {
            return None;
        }
        if record {
            us.push(u.clone());
            vs.push(v.clone());
        }
        progress.iterations = it;
        if check || it == cfg.max_iters {
            let (r, c) = match cfg.mode {
                SolverMode::Balanced => {
                    matvec(&kernel, &v, &mut kv);
                    let row: f64 = (0..n).map(|i| (u[i] * kv[i] - mu[i]).abs()).sum();
                    let col: f64 = (0..m).map(|j| (v[j] * ktu[j] - nu[j]).abs()).sum();
                    (row, col)
                }
                SolverMode::Unbalanced => (du, dv),
            };
            progress.row_residual = r;
            progress.col_residual = c;
            progress.converged = r.max(c) <= cfg.tolerance;
            if check {
                progress.history.push(r.max(c));
                if progress.converged {
                    break;
                }
            }
        }
    }

    let plan = DenseMatrix::from_fn(n, m, |i, j| u[i] * kernel.get(i, j) * v[j]);
    if !plan.is_finite() {
        return None;
    }
    let tape = record.then_some(SinkhornTape {
        epsilon: eps,
        rho1,
        rho2,
        iterates: Iterates::Scaling { kernel, us, vs },
    });
    Some(finish(plan, progress, false, tape))
}

fn solve_log(
    cost: &DenseMatrix,
    mu: &[f64],
    nu: &[f64],
    cfg: &SolverConfig,
    record: bool,
) -> TransportPlan {
    let (n, m) = cost.shape();
    let eps = cfg.epsilon;
    let (rho1, rho2) = cfg.exponents();
    let log_mu: Vec<f64> = mu.iter().map(|x| x.ln()).collect();
    let log_nu: Vec<f64> = nu.iter().map(|x| x.ln()).collect();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut scratch_row = vec![0.0; m];
    let mut scratch_col = vec![0.0; n];
    let (mut fs, mut gs) = (Vec::new(), Vec::new());
    if record {
        gs.push(g.clone());
    }
    let check = cfg.early_stop;
    let mut progress = Progress {
        iterations: 0,
        row_residual: f64::INFINITY,
        col_residual: f64::INFINITY,
        converged: false,
        history: Vec::new(),
    };

    // log Σ_j exp((g_j − C_ij)/ε) for row i
    let row_lse = |i: usize, g: &[f64], scratch: &mut [f64]| {
        for j in 0..m {
            scratch[j] = (g[j] - cost.get(i, j)) / eps;
        }
        logsumexp_unchecked(scratch)
    };
    let col_lse = |j: usize, f: &[f64], scratch: &mut [f64]| {
        for i in 0..n {
            scratch[i] = (f[i] - cost.get(i, j)) / eps;
        }
        logsumexp_unchecked(scratch)
    };

    for it in 1..=cfg.max_iters {
        let mut df: f64 = 0.0;
        for i in 0..n {
            let next = rho1 * eps * (log_mu[i] - row_lse(i, &g, &mut scratch_row));
            df = df.max((next - f[i]).abs());
            f[i] = next;
        }
        let mut dg: f64 = 0.0;
        for j in 0..m {
            let next = rho2 * eps * (log_nu[j] - col_lse(j, &f, &mut scratch_col));
            dg = dg.max((next - g[j]).abs());
            g[j] = next;
        }
        if record {
            fs.push(f.clone());
            gs.push(g.clone());
        }
        progress.iterations = it;
        if check || it == cfg.max_iters {
            let (r, c) = match cfg.mode {
                SolverMode::Balanced => {
                    let row: f64 = (0..n)
                        .map(|i| {
                            ((f[i] / eps + row_lse(i, &g, &mut scratch_row)).exp() - mu[i]).abs()
                        })
                        .sum();
                    let col: f64 = (0..m)
                        .map(|j| {
                            ((g[j] / eps + col_lse(j, &f, &mut scratch_col)).exp() - nu[j]).abs()
                        })
                        .sum();
                    (row, col)
                }
                SolverMode::Unbalanced => (df / eps, dg / eps),
            };
            progress.row_residual = r;
            progress.col_residual = c;
            progress.converged = r.max(c) <= cfg.tolerance;
            if check {
                progress.history.push(r.max(c));
                if progress.converged {
                    break;
                }
            }
        }
    }

    let plan = DenseMatrix::from_fn(n, m, |i, j| ((f[i] + g[j] - cost.get(i, j)) / eps).exp());
    let tape = record.then(|| SinkhornTape {
        epsilon: eps,
        rho1,
        rho2,
        iterates: Iterates::Log {
            cost: cost.clone(),
            fs,
            gs,
        },
    });
    finish(plan, progress, true, tape)
}

fn finish(
    plan: DenseMatrix,
    p: Progress,
    log_domain: bool,
    tape: Option<SinkhornTape>,
) -> TransportPlan {
    TransportPlan {
        plan,
        iterations_used: p.iterations,
        row_residual: p.row_residual,
        col_residual: p.col_residual,
        converged: p.converged,
        residual_history: p.history,
        log_domain,
        tape,
    }
}

#[inline]
fn pow_ratio(target: f64, mass: f64, rho: f64) -> f64 {
    if rho == 1.0 {
        target / mass
    } else {
        (target / mass).powf(rho)
    }
}

fn matvec(k: &DenseMatrix, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (a, b) in k.row(i).iter().zip(v) {
            s += a * b;
        }
        *o = s;
    }
}

fn matvec_t(k: &DenseMatrix, u: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, &ui) in u.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(k.row(i)) {
            *o += a * ui;
        }
    }
}

/// Gradient of a scalar loss with respect to the cost matrix, given the
/// loss gradient `upstream = ∂L/∂γ` with respect to the returned plan.
///
/// Reverse accumulation runs through exactly the iterations the forward
/// pass recorded, so the result is the derivative of the value the forward
/// pass actually returned (converged or not).
pub fn sinkhorn_backward(plan: &TransportPlan, upstream: &DenseMatrix) -> Result<DenseMatrix> {
    let tape = plan.tape.as_ref().ok_or(Error::NoForwardTape)?;
    let gamma = &plan.plan;
    let (n, m) = gamma.shape();
    if upstream.shape() != (n, m) {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient is {:?} but plan is {:?}",
            upstream.shape(),
            gamma.shape()
        )));
    }
    let eps = tape.epsilon;
    let (rho1, rho2) = (tape.rho1, tape.rho2);

    // γ_ij = exp((f_i + g_j − C_ij)/ε)
    let mut grad_cost = DenseMatrix::zeros(n, m);
    let mut f_bar = vec![0.0; n];
    let mut g_bar = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let w = upstream.get(i, j) * gamma.get(i, j) / eps;
            grad_cost.set(i, j, -w);
            f_bar[i] += w;
            g_bar[j] += w;
        }
    }

    let mut weights = DenseMatrix::zeros(n, m);
    let mut next_g_bar = vec![0.0; m];
    let iterations = match &tape.iterates {
        Iterates::Scaling { us, .. } => us.len(),
        Iterates::Log { fs, .. } => fs.len(),
    };
    for k in (1..=iterations).rev() {
        // g⁽ᵏ⁾_j = ρ₂ε(log ν_j − LSE_i((f⁽ᵏ⁾_i − C_ij)/ε)); weights are the
        // column-normalized softmax P_ij.
        column_softmax_weights(&tape.iterates, k, eps, &mut weights);
        for i in 0..n {
            let row = weights.row(i);
            let grow = grad_cost.row_mut(i);
            let mut acc = 0.0;
            for j in 0..m {
                let t = rho2 * g_bar[j] * row[j];
                acc += t;
                grow[j] += t;
            }
            f_bar[i] -= acc;
        }
        // f⁽ᵏ⁾_i = ρ₁ε(log μ_i − LSE_j((g⁽ᵏ⁻¹⁾_j − C_ij)/ε)); weights are the
        // row-normalized softmax Q_ij.
        row_softmax_weights(&tape.iterates, k, eps, &mut weights);
        next_g_bar.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let row = weights.row(i);
            let grow = grad_cost.row_mut(i);
            let fb = rho1 * f_bar[i];
            for j in 0..m {
                let t = fb * row[j];
                grow[j] += t;
                next_g_bar[j] -= t;
            }
        }
        std::mem::swap(&mut g_bar, &mut next_g_bar);
        f_bar.iter_mut().for_each(|x| *x = 0.0);
    }
    Ok(grad_cost)
}

/// `P_ij ∝ u⁽ᵏ⁾_i K_ij`, normalized over i.
fn column_softmax_weights(iterates: &Iterates, k: usize, eps: f64, out: &mut DenseMatrix) {
    let (n, m) = out.shape();
    match iterates {
        Iterates::Scaling { kernel, us, .. } => {
            let u = &us[k - 1];
            let mut col = vec![0.0; m];
            for i in 0..n {
                for (j, c) in col.iter_mut().enumerate() {
                    let w = u[i] * kernel.get(i, j);
                    out.set(i, j, w);
                    *c += w;
                }
            }
            for i in 0..n {
                for (o, c) in out.row_mut(i).iter_mut().zip(&col) {
                    *o /= c;
                }
            }
        }
        Iterates::Log { cost, fs, .. } => {
            let f = &fs[k - 1];
            let mut scratch = vec![0.0; n];
            for j in 0..m {
                for i in 0..n {
                    scratch[i] = (f[i] - cost.get(i, j)) / eps;
                }
                let lse = logsumexp_unchecked(&scratch);
                for i in 0..n {
                    out.set(i, j, (scratch[i] - lse).exp());
                }
            }
        }
    }
}

/// `Q_ij ∝ K_ij v⁽ᵏ⁻¹⁾_j`, normalized over j.
fn row_softmax_weights(iterates: &Iterates, k: usize, eps: f64, out: &mut DenseMatrix) {
    let n = out.rows();
    match iterates {
        Iterates::Scaling { kernel, vs, .. } => {
            let v = &vs[k - 1];
            for i in 0..n {
                let row = out.row_mut(i);
                let mut s = 0.0;
                for (j, o) in row.iter_mut().enumerate() {
                    *o = kernel.get(i, j) * v[j];
                    s += *o;
                }
                row.iter_mut().for_each(|o| *o /= s);
            }
        }
        Iterates::Log { cost, gs, .. } => {
            let g = &gs[k - 1];
            for i in 0..n {
                let row = out.row_mut(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o = (g[j] - cost.get(i, j)) / eps;
                }
                let lse = logsumexp_unchecked(row);
                row.iter_mut().for_each(|o| *o = (*o - lse).exp());
            }
        }
    }
}
