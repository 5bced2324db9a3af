//! Projection-head trainer: AdamW, warmup plus cosine schedule, global-norm
//! clipping, and best-checkpoint selection on validation text → image R@1.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::{recall_at_k_i2t, recall_at_k_t2i, RetrievalCorpus};
use crate::graph::{build_graph, CombinationStrategy, GraphEmbeddings};
use crate::losses::{
    clip_loss, hybrid_loss, siglip_loss, sigrot_loss, Contrastive, LossOutput, ModelBatch,
    ScaleParams,
};
use crate::numerics::{norm2, DenseMatrix, NORM_FLOOR};
use crate::ot::SolverConfig;

/// Linear map into the shared space followed by ℓ2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub weight: DenseMatrix,
}

/// Projected batch with the pre-normalization norms kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Projection {
    pub embeddings: DenseMatrix,
    norms: Vec<f64>,
}

impl ProjectionHead {
    pub fn new(weight: DenseMatrix) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::NonFinite("projection weight".into()));
        }
        Ok(Self { weight })
    }

    /// Gaussian init with standard deviation `1/√d_in`.
    pub fn random(d_out: usize, d_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
        Self {
            weight: DenseMatrix::from_fn(d_out, d_in, |_, _| normal.sample(rng)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let p = self.forward_batch(&DenseMatrix::from_vec(1, x.len(), x.to_vec())?)?;
        Ok(p.embeddings.into_vec())
    }

    /// Projects every row of `x`.
    pub fn forward_batch(&self, x: &DenseMatrix) -> Result<Projection> {
        if x.cols() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "head expects inputs of width {}, got {}",
                self.d_in(),
                x.cols()
            )));
        }
        let mut embeddings = x.matmul_transposed(&self.weight)?;
        let mut norms = Vec::with_capacity(x.rows());
        for i in 0..embeddings.rows() {
            let row = embeddings.row_mut(i);
            let n = norm2(row);
            if !(n > NORM_FLOOR) {
                return Err(Error::NearZeroNorm {
                    row: Some(i),
                    norm: n,
                });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(Projection { embeddings, norms })
    }

    /// Weight gradient given the gradient with respect to the normalized
    /// outputs of `forward_batch(x)`.
    pub fn backward(
        &self,
        x: &DenseMatrix,
        proj: &Projection,
        grad_out: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        if grad_out.shape() != proj.embeddings.shape() {
            return Err(Error::DimensionMismatch(
                "head output gradient shape".into(),
            ));
        }
        let mut grad_pre = grad_out.clone();
        for i in 0..grad_pre.rows() {
            let z = proj.embeddings.row(i);
            let g = grad_pre.row_mut(i);
            let along: f64 = z.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
            for (gj, zj) in g.iter_mut().zip(z) {
                *gj = (*gj - zj * along) / proj.norms[i];
            }
        }
        grad_pre.transpose_matmul(x)
    }
}

/// Trainable parameters: both heads and the logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub image_head: ProjectionHead,
    pub text_head: ProjectionHead,
    pub scale: ScaleParams,
}

impl Model {
    pub fn init(
        d_img: usize,
        d_txt: usize,
        embed_dim: usize,
        objective: Objective,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep initialization off the streams used for shuffling
        rng.set_stream(u64::MAX);
        let image_head = ProjectionHead::random(embed_dim, d_img, &mut rng);
        let text_head = ProjectionHead::random(embed_dim, d_txt, &mut rng);
        Self {
            image_head,
            text_head,
            scale: objective.initial_scale(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    Clip,
    Siglip,
    Sigrot,
    #[default]
    ClipSigrot,
    SiglipSigrot,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Clip,
        Objective::Siglip,
        Objective::Sigrot,
        Objective::ClipSigrot,
        Objective::SiglipSigrot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Clip => "clip",
            Objective::Siglip => "siglip",
            Objective::Sigrot => "sigrot",
            Objective::ClipSigrot => "clip_sigrot",
            Objective::SiglipSigrot => "siglip_sigrot",
        }
    }

    pub fn uses_lambda(self) -> bool {
        matches!(self, Objective::ClipSigrot | Objective::SiglipSigrot)
    }

    pub fn uses_graph(self) -> bool {
        matches!(
            self,
            Objective::Sigrot | Objective::ClipSigrot | Objective::SiglipSigrot
        )
    }

    pub fn initial_scale(self) -> ScaleParams {
        match self {
            Objective::Siglip | Objective::SiglipSigrot => ScaleParams::siglip_init(),
            _ => ScaleParams::clip_init(),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown objective '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    /// Final learning rate as a fraction of the peak.
    pub lr_floor_frac: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub lambda: f64,
    pub objective: Objective,
    pub strategy: CombinationStrategy,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Width of the shared embedding space.
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            peak_lr: 2e-4,
            warmup_epochs: 2,
            lr_floor_frac: 1e-4,
            weight_decay: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-10,
            clip_norm: 1.0,
            lambda: 0.1,
            objective: Objective::default(),
            strategy: CombinationStrategy::default(),
            solver: SolverConfig::training(),
            seed: 0,
            embed_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1".into());
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("lr_floor_frac", self.lr_floor_frac),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [("weight_decay", self.weight_decay), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        for (name, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        self.solver.validate()
    }
}

/// Learning rate for a zero-based optimizer step.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let peak = cfg.peak_lr;
    let floor = cfg.lr_floor_frac * peak;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let last = (cfg.epochs * steps_per_epoch).saturating_sub(1);
    if step < warmup {
        return peak * (0.01 + 0.99 * step as f64 / warmup as f64);
    }
    if last <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (last - warmup) as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Gradients for every trainable parameter of a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub image_head: DenseMatrix,
    pub text_head: DenseMatrix,
    pub tau_prime: f64,
    pub bias: f64,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            image_head: DenseMatrix::zeros(model.image_head.d_out(), model.image_head.d_in()),
            text_head: DenseMatrix::zeros(model.text_head.d_out(), model.text_head.d_in()),
            tau_prime: 0.0,
            bias: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.image_head.is_finite()
            && self.text_head.is_finite()
            && self.tau_prime.is_finite()
            && self.bias.is_finite()
    }

    /// Clips all parameters under one global norm and returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let mut scalars = [self.tau_prime, self.bias];
        let norm = clip_global_norm(
            &mut [
                self.image_head.data_mut(),
                self.text_head.data_mut(),
                &mut scalars,
            ],
            max_norm,
        );
        [self.tau_prime, self.bias] = scalars;
        norm
    }
}

/// Rescales the tensors so their concatenated L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_global_norm(tensors: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = tensors
        .iter()
        .flat_map(|t| t.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        tensors
            .iter_mut()
            .for_each(|t| t.iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// First and second Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub image_moments: Moments,
    pub text_moments: Moments,
    pub tau_moments: Moments,
    pub bias_moments: Moments,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        Self {
            image_moments: Moments::zeros(model.image_head.weight.data().len()),
            text_moments: Moments::zeros(model.text_head.weight.data().len()),
            tau_moments: Moments::zeros(1),
            bias_moments: Moments::zeros(1),
            model,
            step: 0,
        }
    }
}

fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    lr: f64,
    decay: f64,
    t: i32,
    cfg: &TrainConfig,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut moments.first)
        .zip(&mut moments.second)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * decay * *p + lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

/// One AdamW step with weight decay decoupled from the moments and applied
/// to the head matrices only. The log-temperature is clamped afterwards.
pub fn adamw_step(
    state: &mut TrainState,
    grads: &Gradients,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if !grads.image_head.is_finite() {
        return Err(Error::NonFiniteGradient("image head"));
    }
    if !grads.text_head.is_finite() {
        return Err(Error::NonFiniteGradient("text head"));
    }
    if !grads.tau_prime.is_finite() {
        return Err(Error::NonFiniteGradient("log-temperature"));
    }
    if !grads.bias.is_finite() {
        return Err(Error::NonFiniteGradient("logit bias"));
    }
    let model = &state.model;
    if grads.image_head.shape() != model.image_head.weight.shape()
        || grads.text_head.shape() != model.text_head.weight.shape()
    {
        return Err(Error::DimensionMismatch(
            "gradient shapes do not match the model".into(),
        ));
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let wd = cfg.weight_decay;
    let m = &mut state.model;
    adam_update(
        m.image_head.weight.data_mut(),
        grads.image_head.data(),
        &mut state.image_moments,
        lr,
        wd,
        t,
        cfg,
    );
    adam_update(
        m.text_head.weight.data_mut(),
        grads.text_head.data(),
        &mut state.text_moments,
        lr,
        wd,
        t,
        cfg,
    );
    let mut tau = [m.scale.tau_prime];
    adam_update(
        &mut tau,
        &[grads.tau_prime],
        &mut state.tau_moments,
        lr,
        0.0,
        t,
        cfg,
    );
    let mut bias = [m.scale.bias];
    adam_update(
        &mut bias,
        &[grads.bias],
        &mut state.bias_moments,
        lr,
        0.0,
        t,
        cfg,
    );
    m.scale.tau_prime = tau[0];
    m.scale.bias = bias[0];
    m.scale.clamp();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Domain(format!("unknown split '{other}'"))),
        }
    }
}

/// One (image, caption) pair with model-space and graph-space features.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub image_id: String,
    pub caption_id: String,
    pub split: Split,
    pub image_feature: Vec<f64>,
    pub text_feature: Vec<f64>,
    pub graph_image_feature: Vec<f64>,
    pub graph_text_feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    records: Vec<PairRecord>,
    d_img: usize,
    d_txt: usize,
    d_graph: usize,
}

impl PairDataset {
    pub fn new(
        records: Vec<PairRecord>,
        d_img: usize,
        d_txt: usize,
        d_graph: usize,
    ) -> Result<Self> {
        let mut image_features: HashMap<&str, &[f64]> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            for (name, v, d) in [
                ("image feature", &r.image_feature, d_img),
                ("text feature", &r.text_feature, d_txt),
                ("graph image feature", &r.graph_image_feature, d_graph),
                ("graph text feature", &r.graph_text_feature, d_graph),
            ] {
                if v.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "record {i}: {name} has length {}, expected {d}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("record {i}: {name}")));
                }
            }
            for (name, v) in [
                ("graph image feature", &r.graph_image_feature),
                ("graph text feature", &r.graph_text_feature),
            ] {
                let n = norm2(v);
                if (n - 1.0).abs() > 1e-6 {
                    return Err(Error::Domain(format!(
                        "record {i}: {name} has norm {n}, expected 1"
                    )));
                }
            }
            match image_features.get(r.image_id.as_str()) {
                Some(prev) if *prev != r.image_feature.as_slice() => {
                    return Err(Error::Domain(format!(
                        "record {i}: image '{}' appears with two different features",
                        r.image_id
                    )));
                }
                Some(_) => {}
                None => {
                    image_features.insert(&r.image_id, &r.image_feature);
                }
            }
        }
        Ok(Self {
            records,
            d_img,
            d_txt,
            d_graph,
        })
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.d_img, self.d_txt, self.d_graph)
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    fn stack(
        &self,
        idx: &[usize],
        width: usize,
        pick: impl Fn(&PairRecord) -> &[f64],
    ) -> DenseMatrix {
        DenseMatrix::from_fn(idx.len(), width, |i, j| pick(&self.records[idx[i]])[j])
    }

    pub fn image_features(&self, idx: &[usize]) -> DenseMatrix {
        self.stack(idx, self.d_img, |r| &r.image_feature)
    }

    pub fn text_features(&self, idx: &[usize]) -> DenseMatrix {
        self.stack(idx, self.d_txt, |r| &r.text_feature)
    }

    pub fn graph_embeddings(&self, idx: &[usize]) -> Result<GraphEmbeddings> {
        GraphEmbeddings::new(
            self.stack(idx, self.d_graph, |r| &r.graph_text_feature),
            self.stack(idx, self.d_graph, |r| &r.graph_image_feature),
        )
    }
}

/// Batches of record positions for one epoch, keyed by `(seed, epoch)`.
/// A trailing batch with fewer than two pairs is dropped.
pub fn shuffle_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Objective value and parameter gradients on the records `idx`.
pub fn batch_objective(
    model: &Model,
    data: &PairDataset,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, Gradients)> {
    let x_img = data.image_features(idx);
    let x_txt = data.text_features(idx);
    let p_img = model.image_head.forward_batch(&x_img)?;
    let p_txt = model.text_head.forward_batch(&x_txt)?;
    let batch = ModelBatch::raw(p_img.embeddings.clone(), p_txt.embeddings.clone())?;
    let params = model.scale;
    let out: LossOutput = match cfg.objective {
        Objective::Clip => clip_loss(&batch, &params)?,
        Objective::Siglip => siglip_loss(&batch, &params)?,
        kind => {
            let graph = build_graph(&data.graph_embeddings(idx)?, cfg.strategy)?;
            match kind {
                Objective::Sigrot => sigrot_loss(&batch, &graph, &cfg.solver)?,
                Objective::ClipSigrot => hybrid_loss(
                    &batch,
                    &graph,
                    &params,
                    &cfg.solver,
                    cfg.lambda,
                    Contrastive::Clip,
                )?,
                _ => hybrid_loss(
                    &batch,
                    &graph,
                    &params,
                    &cfg.solver,
                    cfg.lambda,
                    Contrastive::Siglip,
                )?,
            }
        }
    };
    if !out.value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let grads = Gradients {
        image_head: model.image_head.backward(&x_img, &p_img, &out.grad_image)?,
        text_head: model.text_head.backward(&x_txt, &p_txt, &out.grad_text)?,
        tau_prime: out.grad_tau_prime,
        bias: out.grad_bias,
    };
    Ok((out.value, grads))
}

/// Projects one split into a retrieval corpus. Images are deduplicated by id
/// in order of first appearance; every record contributes one caption.
pub fn project_split(model: &Model, data: &PairDataset, split: Split) -> Result<RetrievalCorpus> {
    let idx = data.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.name()));
    }
    let mut image_slot: HashMap<&str, usize> = HashMap::new();
    let mut image_records = Vec::new();
    let mut caption_to_image = Vec::with_capacity(idx.len());
    for &i in &idx {
        let id = data.records[i].image_id.as_str();
        let next = image_slot.len();
        let slot = *image_slot.entry(id).or_insert_with(|| {
            image_records.push(i);
            next
        });
        caption_to_image.push(slot);
    }
    let images = model
        .image_head
        .forward_batch(&data.image_features(&image_records))?
        .embeddings;
    let texts = model
        .text_head
        .forward_batch(&data.text_features(&idx))?
        .embeddings;
    RetrievalCorpus::new(images, texts, caption_to_image)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// One-based epoch number.
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub loss: f64,
    pub val_t2i_r1: f64,
    pub val_i2t_r1: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,loss,val_t2i_r1,val_i2t_r1,lr";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.epoch, self.loss, self.val_t2i_r1, self.val_i2t_r1, self.lr
        )
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State after the epoch with the best validation text → image R@1.
    pub best: TrainState,
    pub best_epoch: usize,
    /// State after the last epoch.
    pub last: TrainState,
    pub history: Vec<EpochRecord>,
}

pub fn train(data: &PairDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_idx = data.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if data.split_indices(Split::Val).is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    if cfg.batch_size > train_idx.len() {
        return Err(Error::InvalidConfig(format!(
            "batch_size {} exceeds the {} training pairs",
            cfg.batch_size,
            train_idx.len()
        )));
    }
    let (d_img, d_txt, _) = data.dims();
    let mut state = TrainState::new(Model::init(
        d_img,
        d_txt,
        cfg.embed_dim,
        cfg.objective,
        cfg.seed,
    ));
    let steps_per_epoch = shuffle_batches(train_idx.len(), cfg.batch_size, cfg.seed, 0).len();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, TrainState)> = None;
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let batches = shuffle_batches(train_idx.len(), cfg.batch_size, cfg.seed, epoch as u64);
        for positions in &batches {
            let idx: Vec<usize> = positions.iter().map(|&p| train_idx[p]).collect();
            let (value, mut grads) = batch_objective(&state.model, data, &idx, cfg)?;
            grads.clip(cfg.clip_norm);
            lr = lr_at(global_step, cfg, steps_per_epoch);
            adamw_step(&mut state, &grads, lr, cfg)?;
            loss_sum += value;
            global_step += 1;
        }
        let val = project_split(&state.model, data, Split::Val)?;
        let t2i = recall_at_k_t2i(&val, &[1])?[&1];
        let i2t = recall_at_k_i2t(&val, &[1])?[&1];
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / batches.len() as f64,
            val_t2i_r1: t2i,
            val_i2t_r1: i2t,
            lr,
        });
        if best.as_ref().is_none_or(|(score, _, _)| t2i > *score) {
            best = Some((t2i, epoch + 1, state.clone()));
        }
    }
    let (_, best_epoch, best_state) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_state,
        best_epoch,
        last: state,
        history,
    })
}
