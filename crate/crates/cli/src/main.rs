use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sigrot::graph::CombinationStrategy;
use sigrot::ot::SolverMode;
use sigrot::training::{Objective, Split};
use sigrot_cli::commands::{self, SolveOptions};
use sigrot_cli::config::parse_mode;
use sigrot_cli::synth::SynthConfig;
use sigrot_cli::{CliError, CliResult};

/// Similarity-graph regularized optimal transport for image-text embedding alignment.
#[derive(Parser, Debug)]
#[command(name = "sigrot", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a clustered synthetic embedding file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        /// Images per cluster.
        #[arg(long, default_value_t = 64)]
        pairs_per_cluster: usize,
        #[arg(long, default_value_t = 32)]
        d_img: usize,
        #[arg(long, default_value_t = 24)]
        d_txt: usize,
        #[arg(long, default_value_t = 16)]
        d_graph: usize,
        #[arg(long, default_value_t = 0.35)]
        sigma: f64,
        #[arg(long, default_value_t = 3)]
        captions: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Reuse the image cluster centers for captions (needs --d-img == --d-txt).
        #[arg(long)]
        shared_centers: bool,
    },
    /// Train the projection heads and write the best checkpoint and history.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// key=value configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra key=value settings applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Also write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve an entropic transport problem with uniform marginals.
    SolveOt {
        #[arg(long)]
        cost: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "unbalanced", value_parser = parse_solver_mode)]
        mode: SolverMode,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
        #[arg(long, default_value_t = 0.5)]
        tau1: f64,
        #[arg(long, default_value_t = 0.5)]
        tau2: f64,
        #[arg(long, default_value_t = 2000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Build a batch similarity graph and its row-softmax target.
    Graph {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cross")]
        strategy: CombinationStrategy,
        #[arg(long)]
        out: PathBuf,
        /// Number of leading records in the batch.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Restrict to one split before taking the leading records.
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
    },
    /// Compare analytic and finite-difference gradients on a small batch.
    Gradcheck {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_objective)]
        objective: Objective,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: sigrot::Error| e.to_string())
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: sigrot::Error| e.to_string())
}

fn parse_solver_mode(s: &str) -> Result<SolverMode, String> {
    parse_mode(s).ok_or_else(|| format!("unknown mode '{s}' (expected balanced or unbalanced)"))
}

fn run(cli: Cli) -> CliResult<()> {
    commands::thread_budget()?;
    match cli.command {
        Command::Synth {
            out,
            clusters,
            pairs_per_cluster,
            d_img,
            d_txt,
            d_graph,
            sigma,
            captions,
            seed,
            shared_centers,
        } => {
            let cfg = SynthConfig {
                n_clusters: clusters,
                pairs_per_cluster,
                d_model_img: d_img,
                d_model_txt: d_txt,
                d_graph,
                noise_sigma: sigma,
                captions_per_image: captions,
                seed,
                shared_centers,
            };
            let data = commands::cmd_synth(&cfg, &out)?;
            println!(
                "wrote {} records to {}",
                data.records().len(),
                out.display()
            );
        }
        Command::Train {
            data,
            out_dir,
            config,
            overrides,
        } => {
            let run = commands::resolve_config(config.as_deref(), &overrides)?;
            for w in run.warnings() {
                eprintln!("warning: {w}");
            }
            let summary = commands::cmd_train(&run, &data, &out_dir)?;
            print!(
                "{}",
                sigrot::training::history_csv(&summary.outcome.history)
            );
            println!(
                "best epoch {} written to {}",
                summary.outcome.best_epoch,
                summary.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let report = commands::cmd_eval(&checkpoint, &data, split)?;
            let csv = commands::eval_csv(&report);
            print!("{csv}");
            println!();
            print!("{}", report.table());
            if let Some(path) = out {
                commands::write_text(&path, &csv)?;
            }
        }
        Command::SolveOt {
            cost,
            out,
            mode,
            eps,
            tau1,
            tau2,
            max_iters,
            tolerance,
        } => {
            let opts = SolveOptions {
                mode,
                epsilon: eps,
                tau1,
                tau2,
                max_iters,
                tolerance,
            };
            let solved = commands::cmd_solve_ot(&cost, &opts, &out)?;
            println!("{}", solved.diagnostics());
        }
        Command::Graph {
            data,
            strategy,
            out,
            n,
            split,
        } => {
            let g = commands::cmd_graph(&data, strategy, n, split, &out)?;
            println!(
                "wrote {0}x{0} {1} graph to {2}",
                g.len(),
                g.strategy,
                out.display()
            );
        }
        Command::Gradcheck {
            data,
            objective,
            n,
            seed,
        } => {
            let dataset = commands::load_dataset(&data)?;
            let report = commands::gradcheck(&dataset, objective, n, seed)?;
            println!("{}", report.summary());
            if !report.passed() {
                return Err(CliError::GradcheckFailed {
                    max_error: report.max_relative_error,
                    tolerance: commands::GRADCHECK_TOLERANCE,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
