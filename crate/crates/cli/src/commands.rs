//! Subcommand drivers. Each reads and writes files and returns what the
//! binary prints, so tests can run them in-process.

use std::fs;
use std::path::{Path, PathBuf};

use sigrot::eval::{evaluate, EvalReport};
use sigrot::graph::{build_graph, CombinationStrategy};
use sigrot::ot::{
    sinkhorn_balanced, sinkhorn_unbalanced, transport_cost, SolverConfig, SolverMode, TransportPlan,
};
use sigrot::training::{
    batch_objective, history_csv, project_split, train, Gradients, Model, Objective, PairDataset,
    Split, TrainConfig, TrainOutcome,
};

use crate::config::{self, RunConfig};
use crate::error::{CliError, CliResult};
use crate::formats;
use crate::synth::{self, SynthConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.txt";

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn source_name(path: &Path) -> String {
    path.display().to_string()
}

pub fn load_dataset(path: &Path) -> CliResult<PairDataset> {
    formats::parse_embeddings(&read_text(path)?, &source_name(path))
}

pub fn cmd_synth(cfg: &SynthConfig, out: &Path) -> CliResult<PairDataset> {
    let data = synth::generate(cfg)?;
    write_text(out, &formats::write_embeddings(&data))?;
    Ok(data)
}

/// Loads the config file (if any) and then applies `key=value` overrides.
pub fn resolve_config(config_path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let base = match config_path {
        Some(p) => config::parse(&read_text(p)?, &source_name(p))?,
        None => config::parse("", "defaults")?,
    };
    base.with_overrides(overrides)
}

pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub warnings: Vec<String>,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
}

pub fn cmd_train(run: &RunConfig, data_path: &Path, out_dir: &Path) -> CliResult<TrainSummary> {
    let data = load_dataset(data_path)?;
    let outcome = train(&data, &run.train)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let history = out_dir.join(HISTORY_FILE);
    write_text(&checkpoint, &formats::write_checkpoint(&outcome.best.model))?;
    write_text(&history, &history_csv(&outcome.history))?;
    write_text(
        &out_dir.join(RESOLVED_CONFIG_FILE),
        &config::to_text(&run.train),
    )?;
    Ok(TrainSummary {
        outcome,
        warnings: run.warnings(),
        checkpoint,
        history,
    })
}

pub fn eval_csv(report: &EvalReport) -> String {
    format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row())
}

pub fn cmd_eval(checkpoint: &Path, data_path: &Path, split: Split) -> CliResult<EvalReport> {
    let model = formats::parse_checkpoint(&read_text(checkpoint)?, &source_name(checkpoint))?;
    let data = load_dataset(data_path)?;
    let (d_img, d_txt, _) = data.dims();
    if model.image_head.d_in() != d_img || model.text_head.d_in() != d_txt {
        return Err(sigrot::Error::DimensionMismatch(format!(
            "checkpoint expects features of width {}/{}, data has {d_img}/{d_txt}",
            model.image_head.d_in(),
            model.text_head.d_in()
        ))
        .into());
    }
    Ok(evaluate(&project_split(&model, &data, split)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub mode: SolverMode,
    pub epsilon: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        let d = SolverConfig::default();
        Self {
            mode: d.mode,
            epsilon: d.epsilon,
            tau1: d.tau1,
            tau2: d.tau2,
            max_iters: d.max_iters,
            tolerance: d.tolerance,
        }
    }
}

pub struct SolveOutput {
    pub plan: TransportPlan,
    pub cost: f64,
}

impl SolveOutput {
    pub fn diagnostics(&self) -> String {
        let p = &self.plan;
        format!(
            "iterations={} converged={} row_residual={:.3e} col_residual={:.3e} log_domain={} transport_cost={}",
            p.iterations_used,
            p.converged,
            p.row_residual,
            p.col_residual,
            p.log_domain,
            formats::fmt_f64(self.cost)
        )
    }
}

/// Solves with uniform marginals and writes the plan.
pub fn cmd_solve_ot(cost_path: &Path, opts: &SolveOptions, out: &Path) -> CliResult<SolveOutput> {
    let cost = formats::parse_single_matrix(&read_text(cost_path)?, &source_name(cost_path))?;
    let (n, m) = cost.shape();
    if n == 0 || m == 0 {
        return Err(sigrot::Error::EmptyInput("cost matrix").into());
    }
    let mu = vec![1.0 / n as f64; n];
    let nu = vec![1.0 / m as f64; m];
    let cfg = SolverConfig {
        epsilon: opts.epsilon,
        tau1: opts.tau1,
        tau2: opts.tau2,
        max_iters: opts.max_iters,
        tolerance: opts.tolerance,
        mode: opts.mode,
        early_stop: true,
    };
    let plan = match opts.mode {
        SolverMode::Balanced => sinkhorn_balanced(&cost, &mu, &nu, &cfg)?,
        SolverMode::Unbalanced => sinkhorn_unbalanced(&cost, &mu, &nu, &cfg)?,
    };
    write_text(out, &formats::write_matrices(&[("plan", &plan.plan)]))?;
    let cost = transport_cost(&plan.plan, &cost)?;
    Ok(SolveOutput { plan, cost })
}

/// Builds the graph over the first `n` records of `split` (all records when
/// `split` is `None`) and writes the graph and its row-softmax target.
pub fn cmd_graph(
    data_path: &Path,
    strategy: CombinationStrategy,
    n: usize,
    split: Option<Split>,
    out: &Path,
) -> CliResult<sigrot::graph::SimilarityGraph> {
    let data = load_dataset(data_path)?;
    let mut idx: Vec<usize> = match split {
        Some(s) => data.split_indices(s),
        None => (0..data.records().len()).collect(),
    };
    if idx.is_empty() {
        return Err(sigrot::Error::EmptySplit(split.map_or("all", Split::name)).into());
    }
    idx.truncate(n);
    let graph = build_graph(&data.graph_embeddings(&idx)?, strategy)?;
    write_text(
        out,
        &formats::write_matrices(&[("graph", &graph.graph), ("target", &graph.target)]),
    )?;
    Ok(graph)
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub objective: Objective,
    pub batch: usize,
    pub parameters: usize,
    pub max_relative_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }

    pub fn summary(&self) -> String {
        format!(
            "objective={} batch={} parameters={} max_relative_error={:.3e} analytic_norm={:.6e} numeric_norm={:.6e} {}",
            self.objective,
            self.batch,
            self.parameters,
            self.max_relative_error,
            self.analytic_norm,
            self.numeric_norm,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative error with a floor tied to the largest numeric entry, so
/// entries that are zero up to rounding do not dominate.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn flatten(g: &Gradients) -> Vec<f64> {
    let mut v = g.image_head.data().to_vec();
    v.extend_from_slice(g.text_head.data());
    v.push(g.tau_prime);
    v.push(g.bias);
    v
}

fn param_mut(model: &mut Model, k: usize) -> &mut f64 {
    let ni = model.image_head.weight.data().len();
    let nt = model.text_head.weight.data().len();
    if k < ni {
        &mut model.image_head.weight.data_mut()[k]
    } else if k < ni + nt {
        &mut model.text_head.weight.data_mut()[k - ni]
    } else if k == ni + nt {
        &mut model.scale.tau_prime
    } else {
        &mut model.scale.bias
    }
}

/// Compares the full-pipeline analytic gradient (heads, log-temperature and
/// bias) with central finite differences on the first `n` records.
pub fn gradcheck(
    data: &PairDataset,
    objective: Objective,
    n: usize,
    seed: u64,
) -> CliResult<GradcheckReport> {
    if !(2..=8).contains(&n) {
        return Err(CliError::Usage(format!(
            "gradcheck batch must hold 2 to 8 pairs, got {n}"
        )));
    }
    if data.records().len() < n {
        return Err(sigrot::Error::DimensionMismatch(format!(
            "gradcheck needs {n} records, file has {}",
            data.records().len()
        ))
        .into());
    }
    let idx: Vec<usize> = (0..n).collect();
    let cfg = TrainConfig {
        objective,
        embed_dim: 4,
        seed,
        ..TrainConfig::default()
    };
    let (d_img, d_txt, _) = data.dims();
    let model = Model::init(d_img, d_txt, cfg.embed_dim, objective, seed);
    let (_, grads) = batch_objective(&model, data, &idx, &cfg)?;
    let analytic = flatten(&grads);
    let mut numeric = vec![0.0; analytic.len()];
    for (k, slot) in numeric.iter_mut().enumerate() {
        let mut plus = model.clone();
        *param_mut(&mut plus, k) += GRADCHECK_STEP;
        let mut minus = model.clone();
        *param_mut(&mut minus, k) -= GRADCHECK_STEP;
        let fp = batch_objective(&plus, data, &idx, &cfg)?.0;
        let fm = batch_objective(&minus, data, &idx, &cfg)?.0;
        *slot = (fp - fm) / (2.0 * GRADCHECK_STEP);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(GradcheckReport {
        objective,
        batch: n,
        parameters: analytic.len(),
        max_relative_error: max_relative_error(&analytic, &numeric),
        analytic_norm: norm(&analytic),
        numeric_norm: norm(&numeric),
    })
}

/// Reads `SIGROT_THREADS` (default 1). The build runs serially, so any valid
/// value is accepted and only caps parallelism.
pub fn thread_budget() -> CliResult<usize> {
    match std::env::var("SIGROT_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "SIGROT_THREADS must be a positive integer, got '{v}'"
            ))),
        },
    }
}
