//! Contrastive and transport-based alignment losses with analytic gradients.
//!
//! All losses consume a [`ModelBatch`] of N matched (image, caption) pairs and
//! return gradients with respect to the normalized embeddings and the two
//! learnable logit scalars.
//!
//! Logit conventions, with `τ = exp(τ′)`:
//!
//! * CLIP: `S/τ`, symmetric softmax cross-entropy over rows and columns.
//! * SigLIP: `S/τ + b`, one sigmoid cross-entropy term per (i, j) pair,
//!   `−(1/N) Σᵢⱼ log σ(zᵢⱼ(S_ij/τ + b))` with `zᵢⱼ = +1` on the diagonal and
//!   `−1` elsewhere.
//! * SIGROT: no logit scalars. `C = 1 − S` is transported in both directions
//!   with uniform marginals, and each plan scaled by N is compared row by row
//!   to the graph target with the generalized KL divergence.

use crate::error::{Error, Result};
use crate::graph::SimilarityGraph;
use crate::numerics::{logsumexp_unchecked, norm2, DenseMatrix};
use crate::ot::{sinkhorn_backward, sinkhorn_with_tape, SolverConfig};

/// Upper clamp for the log-temperature: `exp(τ′) < 1000`.
pub const MAX_TAU_PRIME: f64 = 6.907_755_278_982_137; // ln 1000
/// Lower clamp for the log-temperature: `exp(τ′) ≥ 0.01`, so logits stay
/// within 100× the cosine range.
pub const MIN_TAU_PRIME: f64 = -4.605_170_185_988_091; // ln 0.01
/// Plan entries are floored here before taking logs.
pub const PLAN_FLOOR: f64 = 1e-30;

const NORM_TOLERANCE: f64 = 1e-9;

/// Normalized image and caption embeddings of N matched pairs.
#[derive(Debug, Clone)]
pub struct ModelBatch {
    pub image: DenseMatrix,
    pub text: DenseMatrix,
}

impl ModelBatch {
    /// Validates equal shapes and unit-norm rows.
    pub fn new(image: DenseMatrix, text: DenseMatrix) -> Result<Self> {
        let batch = Self::raw(image, text)?;
        for (name, m) in [("image", &batch.image), ("text", &batch.text)] {
            for i in 0..m.rows() {
                let n = norm2(m.row(i));
                if (n - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::Domain(format!(
                        "{name} embedding {i} has norm {n}, expected 1"
                    )));
                }
            }
        }
        Ok(batch)
    }

    /// Checks shapes only. The loss formulas are defined for any embeddings,
    /// which finite-difference probes rely on.
    pub fn raw(image: DenseMatrix, text: DenseMatrix) -> Result<Self> {
        if image.shape() != text.shape() {
            return Err(Error::DimensionMismatch(format!(
                "image batch is {:?} but text batch is {:?}",
                image.shape(),
                text.shape()
            )));
        }
        Ok(Self { image, text })
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.image.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.image.cols()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            image: self.image.select_rows(order),
            text: self.text.select_rows(order),
        }
    }
}

/// Learnable logit scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    /// Log-temperature τ′.
    pub tau_prime: f64,
    /// Logit bias b (SigLIP only).
    pub bias: f64,
}

impl ScaleParams {
    /// τ = 0.07.
    pub fn clip_init() -> Self {
        Self {
            tau_prime: 0.07f64.ln(),
            bias: 0.0,
        }
    }

    /// τ = 0.06, b = −9.
    pub fn siglip_init() -> Self {
        Self {
            tau_prime: 0.06f64.ln(),
            bias: -9.0,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.tau_prime.exp()
    }

    pub fn clamp(&mut self) {
        self.tau_prime = self.tau_prime.clamp(MIN_TAU_PRIME, MAX_TAU_PRIME);
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_image: DenseMatrix,
    pub grad_text: DenseMatrix,
    pub grad_tau_prime: f64,
    pub grad_bias: f64,
}

impl LossOutput {
    fn from_similarity_grad(value: f64, batch: &ModelBatch, grad_sim: &DenseMatrix) -> Self {
        // S = Zi Ztᵀ  ⇒  ∂/∂Zi = ∂S · Zt,  ∂/∂Zt = ∂Sᵀ · Zi
        let grad_image = grad_sim.matmul(&batch.text).expect("batch shapes agree");
        let grad_text = grad_sim
            .transpose_matmul(&batch.image)
            .expect("batch shapes agree");
        Self {
            value,
            grad_image,
            grad_text,
            grad_tau_prime: 0.0,
            grad_bias: 0.0,
        }
    }

    /// `λ·other + self`, gradients included.
    fn add_weighted(mut self, other: &Self, lambda: f64) -> Self {
        self.value += lambda * other.value;
        self.grad_image
            .add_scaled(&other.grad_image, lambda)
            .expect("same batch");
        self.grad_text
            .add_scaled(&other.grad_text, lambda)
            .expect("same batch");
        self.grad_tau_prime += lambda * other.grad_tau_prime;
        self.grad_bias += lambda * other.grad_bias;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_image.is_finite()
            && self.grad_text.is_finite()
            && self.grad_tau_prime.is_finite()
            && self.grad_bias.is_finite()
    }
}

/// Which contrastive objective a hybrid loss pairs with SIGROT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contrastive {
    Clip,
    Siglip,
}

/// How the SIGROT loss treats the transport plans when differentiating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlanGradient {
    /// Reverse accumulation through the unrolled solver iterations.
    #[default]
    Unrolled,
    /// Plans are constants. The loss then carries no gradient with respect
    /// to the embeddings, since its only other input is the fixed graph.
    Detached,
}

/// `S = Z_image Z_textᵀ`.
pub fn similarity_logits(batch: &ModelBatch) -> DenseMatrix {
    batch
        .image
        .matmul_transposed(&batch.text)
        .expect("batch shapes agree")
}

fn require_pairs(batch: &ModelBatch) -> Result<usize> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    Ok(n)
}

pub fn clip_loss(batch: &ModelBatch, params: &ScaleParams) -> Result<LossOutput> {
    let n = require_pairs(batch)?;
    let tau = params.temperature();
    let s = similarity_logits(batch);
    let logits = s.scaled(1.0 / tau);

    let mut grad_logits = DenseMatrix::zeros(n, n);
    let mut value = 0.0;
    let scale = 0.5 / n as f64;
    let mut buf = vec![0.0; n];

    // image → text: softmax along each row
    for i in 0..n {
        let row = logits.row(i);
        let lse = logsumexp_unchecked(row);
        value += lse - row[i];
        for j in 0..n {
            let p = (row[j] - lse).exp();
            let t = if i == j { p - 1.0 } else { p };
            grad_logits.set(i, j, scale * t);
        }
    }
    // text → image: softmax along each column
    for j in 0..n {
        for i in 0..n {
            buf[i] = logits.get(i, j);
        }
        let lse = logsumexp_unchecked(&buf);
        value += lse - buf[j];
        for i in 0..n {
            let p = (buf[i] - lse).exp();
            let t = if i == j { p - 1.0 } else { p };
            grad_logits.set(i, j, grad_logits.get(i, j) + scale * t);
        }
    }
    value *= scale;

    // logits = S·e^{−τ′}
    let grad_tau_prime = -grad_logits
        .data()
        .iter()
        .zip(logits.data())
        .map(|(g, l)| g * l)
        .sum::<f64>();
    let grad_sim = grad_logits.scaled(1.0 / tau);
    let mut out = LossOutput::from_similarity_grad(value, batch, &grad_sim);
    out.grad_tau_prime = grad_tau_prime;
    Ok(out)
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(z·(s/τ + b))` for one pair, `z = +1` for a matched pair.
pub fn siglip_pair_term(similarity: f64, matched: bool, params: &ScaleParams) -> f64 {
    let z = if matched { 1.0 } else { -1.0 };
    softplus(-z * (similarity / params.temperature() + params.bias))
}

pub fn siglip_loss(batch: &ModelBatch, params: &ScaleParams) -> Result<LossOutput> {
    let n = require_pairs(batch)?;
    let tau = params.temperature();
    let s = similarity_logits(batch);
    let inv_n = 1.0 / n as f64;

    let mut grad_logits = DenseMatrix::zeros(n, n);
    let mut value = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            let x = s.get(i, j) / tau + params.bias;
            value += softplus(-z * x);
            grad_logits.set(i, j, -z * sigmoid(-z * x) * inv_n);
        }
    }
    value *= inv_n;

    let grad_bias = grad_logits.sum();
    // ∂x/∂τ′ = −S/τ
    let grad_tau_prime = -grad_logits
        .data()
        .iter()
        .zip(s.data())
        .map(|(g, v)| g * v / tau)
        .sum::<f64>();
    let grad_sim = grad_logits.scaled(1.0 / tau);
    let mut out = LossOutput::from_similarity_grad(value, batch, &grad_sim);
    out.grad_tau_prime = grad_tau_prime;
    out.grad_bias = grad_bias;
    Ok(out)
}

/// Row-averaged generalized KL of `N·plan` against `target`, plus its
/// gradient with respect to `plan` (scaled by `weight`).
fn scaled_plan_kl(plan: &DenseMatrix, target: &DenseMatrix, weight: f64) -> (f64, DenseMatrix) {
    let n = plan.rows();
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad = DenseMatrix::zeros(n, plan.cols());
    for i in 0..n {
        for j in 0..plan.cols() {
            let raw = nf * plan.get(i, j);
            let p = raw.max(PLAN_FLOOR);
            let t = target.get(i, j);
            let log_ratio = (p / t).ln();
            value += p * log_ratio - p + t;
            // ∂/∂γ of (1/N)(p log(p/t) − p + t) with p = Nγ is log(p/t)
            if raw >= PLAN_FLOOR {
                grad.set(i, j, weight * log_ratio);
            }
        }
    }
    // each term is nonnegative; only rounding can push the sum below zero
    ((value / nf).max(0.0), grad)
}

/// Similarity-graph regularized optimal transport loss.
pub fn sigrot_loss(
    batch: &ModelBatch,
    graph: &SimilarityGraph,
    cfg: &SolverConfig,
) -> Result<LossOutput> {
    sigrot_loss_with(batch, graph, cfg, PlanGradient::Unrolled)
}

pub fn sigrot_loss_with(
    batch: &ModelBatch,
    graph: &SimilarityGraph,
    cfg: &SolverConfig,
    plan_gradient: PlanGradient,
) -> Result<LossOutput> {
    let n = batch.len();
    if graph.len() != n || graph.target.shape() != (n, n) {
        return Err(Error::GraphBatchMismatch {
            graph: graph.len(),
            batch: n,
        });
    }
    if n == 0 {
        return Err(Error::EmptyInput("sigrot_loss"));
    }
    let s = similarity_logits(batch);
    let cost_i2t = DenseMatrix::from_fn(n, n, |i, j| 1.0 - s.get(i, j));
    let cost_t2i = cost_i2t.transpose();
    let marginal = vec![1.0 / n as f64; n];

    let plan_i2t = sinkhorn_with_tape(&cost_i2t, &marginal, &marginal, cfg)?;
    let plan_t2i = sinkhorn_with_tape(&cost_t2i, &marginal, &marginal, cfg)?;
    let (kl_i2t, up_i2t) = scaled_plan_kl(&plan_i2t.plan, &graph.target, 0.5);
    let (kl_t2i, up_t2i) = scaled_plan_kl(&plan_t2i.plan, &graph.target, 0.5);
    let value = 0.5 * (kl_i2t + kl_t2i);

    let grad_sim = match plan_gradient {
        PlanGradient::Detached => DenseMatrix::zeros(n, n),
        PlanGradient::Unrolled => {
            let g_i2t = sinkhorn_backward(&plan_i2t, &up_i2t)?;
            let g_t2i = sinkhorn_backward(&plan_t2i, &up_t2i)?;
            // C = 1 − S, and the second problem sees Cᵀ
            DenseMatrix::from_fn(n, n, |i, j| -g_i2t.get(i, j) - g_t2i.get(j, i))
        }
    };
    Ok(LossOutput::from_similarity_grad(value, batch, &grad_sim))
}

/// `λ·contrastive + SIGROT`.
pub fn hybrid_loss(
    batch: &ModelBatch,
    graph: &SimilarityGraph,
    params: &ScaleParams,
    cfg: &SolverConfig,
    lambda: f64,
    contrastive: Contrastive,
) -> Result<LossOutput> {
    if !(lambda >= 0.0) {
        return Err(Error::NegativeLambda(lambda));
    }
    let ot = sigrot_loss(batch, graph, cfg)?;
    if lambda == 0.0 {
        return Ok(ot);
    }
    let c = contrastive_loss(batch, params, contrastive)?;
    Ok(ot.add_weighted(&c, lambda))
}

pub fn contrastive_loss(
    batch: &ModelBatch,
    params: &ScaleParams,
    kind: Contrastive,
) -> Result<LossOutput> {
    match kind {
        Contrastive::Clip => clip_loss(batch, params),
        Contrastive::Siglip => siglip_loss(batch, params),
    }
}
