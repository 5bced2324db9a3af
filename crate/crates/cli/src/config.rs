//! `key=value` run configuration covering every training and solver knob.

use std::collections::BTreeSet;

use sigrot::ot::SolverMode;
use sigrot::training::TrainConfig;

use crate::error::{CliError, CliResult};
use crate::formats::fmt_f64;

/// Every accepted key, in the order [`to_text`] writes them.
pub const KEYS: [&str; 22] = [
    "epochs",
    "batch_size",
    "peak_lr",
    "warmup_epochs",
    "lr_floor_frac",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "clip_norm",
    "lambda",
    "objective",
    "strategy",
    "seed",
    "embed_dim",
    "epsilon",
    "tau1",
    "tau2",
    "solver_max_iters",
    "solver_tolerance",
    "solver_mode",
    "solver_early_stop",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Keys that were set explicitly.
    pub keys_set: BTreeSet<String>,
}

impl RunConfig {
    /// Applies `key=value` overrides given on the command line.
    pub fn with_overrides(mut self, overrides: &[String]) -> CliResult<Self> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override '{o}' is not key=value")))?;
            apply(&mut self.train, k.trim(), v.trim()).map_err(CliError::Usage)?;
            self.keys_set.insert(k.trim().to_string());
        }
        self.train.validate()?;
        Ok(self)
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.keys_set.contains("lambda") && !self.train.objective.uses_lambda() {
            w.push(format!(
                "lambda is ignored by objective '{}'",
                self.train.objective
            ));
        }
        if self.keys_set.contains("strategy") && !self.train.objective.uses_graph() {
            w.push(format!(
                "strategy is ignored by objective '{}'",
                self.train.objective
            ));
        }
        w
    }
}

fn mode_name(m: SolverMode) -> &'static str {
    match m {
        SolverMode::Balanced => "balanced",
        SolverMode::Unbalanced => "unbalanced",
    }
}

pub fn parse_mode(s: &str) -> Option<SolverMode> {
    match s {
        "balanced" => Some(SolverMode::Balanced),
        "unbalanced" => Some(SolverMode::Unbalanced),
        _ => None,
    }
}

/// Applies one `key=value` setting. The error is a bare message; callers add
/// the location.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
        v.parse()
            .map_err(|_| format!("invalid value '{v}' for {key}"))
    }
    let s = &mut cfg.solver;
    match key {
        "epochs" => cfg.epochs = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "peak_lr" => cfg.peak_lr = num(key, value)?,
        "warmup_epochs" => cfg.warmup_epochs = num(key, value)?,
        "lr_floor_frac" => cfg.lr_floor_frac = num(key, value)?,
        "weight_decay" => cfg.weight_decay = num(key, value)?,
        "adam_beta1" => cfg.adam_beta1 = num(key, value)?,
        "adam_beta2" => cfg.adam_beta2 = num(key, value)?,
        "adam_eps" => cfg.adam_eps = num(key, value)?,
        "clip_norm" => cfg.clip_norm = num(key, value)?,
        "lambda" => cfg.lambda = num(key, value)?,
        "objective" => cfg.objective = value.parse().map_err(|e: sigrot::Error| e.to_string())?,
        "strategy" => cfg.strategy = value.parse()?,
        "seed" => cfg.seed = num(key, value)?,
        "embed_dim" => cfg.embed_dim = num(key, value)?,
        "epsilon" => s.epsilon = num(key, value)?,
        "tau1" => s.tau1 = num(key, value)?,
        "tau2" => s.tau2 = num(key, value)?,
        "solver_max_iters" => s.max_iters = num(key, value)?,
        "solver_tolerance" => s.tolerance = num(key, value)?,
        "solver_mode" => {
            s.mode = parse_mode(value).ok_or_else(|| format!("unknown solver mode '{value}'"))?
        }
        "solver_early_stop" => s.early_stop = num(key, value)?,
        _ => return Err(format!("unknown key '{key}'")),
    }
    Ok(())
}

/// Parses a config file on top of the defaults. Blank lines and lines
/// starting with `#` are skipped; duplicate and unknown keys are errors.
pub fn parse(text: &str, source: &str) -> CliResult<RunConfig> {
    let mut train = TrainConfig::default();
    let mut keys_set = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let trimmed = raw.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let indent = raw.chars().count() - trimmed.chars().count();
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(CliError::parse(
                source,
                line_no,
                indent + 1,
                "expected key=value",
            ));
        };
        let key = key.trim();
        let value_col = indent
            + trimmed[..trimmed.find('=').unwrap()].chars().count()
            + 2
            + (value.chars().count() - value.trim_start().chars().count());
        if !keys_set.insert(key.to_string()) {
            return Err(CliError::parse(
                source,
                line_no,
                indent + 1,
                format!("duplicate key '{key}'"),
            ));
        }
        apply(&mut train, key, value.trim()).map_err(|msg| {
            let col = if msg.starts_with("unknown key") {
                indent + 1
            } else {
                value_col
            };
            CliError::parse(source, line_no, col, msg)
        })?;
    }
    train.validate()?;
    Ok(RunConfig { train, keys_set })
}

/// Writes every key, so `parse(to_text(c))` reproduces `c`.
pub fn to_text(cfg: &TrainConfig) -> String {
    let s = &cfg.solver;
    let values = [
        cfg.epochs.to_string(),
        cfg.batch_size.to_string(),
        fmt_f64(cfg.peak_lr),
        cfg.warmup_epochs.to_string(),
        fmt_f64(cfg.lr_floor_frac),
        fmt_f64(cfg.weight_decay),
        fmt_f64(cfg.adam_beta1),
        fmt_f64(cfg.adam_beta2),
        fmt_f64(cfg.adam_eps),
        fmt_f64(cfg.clip_norm),
        fmt_f64(cfg.lambda),
        cfg.objective.to_string(),
        cfg.strategy.to_string(),
        cfg.seed.to_string(),
        cfg.embed_dim.to_string(),
        fmt_f64(s.epsilon),
        fmt_f64(s.tau1),
        fmt_f64(s.tau2),
        s.max_iters.to_string(),
        fmt_f64(s.tolerance),
        mode_name(s.mode).to_string(),
        s.early_stop.to_string(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}
