use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use log::error;

use super::*;

#[derive(Debug, Parser)]
#[command(name = "seqpick", version, about = "Depalletizing imitation and reward-shaping experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's out_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config's seed list.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Fault {
    NegateChi2,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll the scripted expert and write a trajectory dataset.
    CollectExpert {
        #[command(flatten)]
        common: Common,
    },
    /// Train one algorithm for every seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        algo: Algo,
        /// Run the behavioral cloning episodes x steps grid instead.
        #[arg(long)]
        sweep: bool,
    },
    /// Greedy evaluation on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Network checkpoint to evaluate.
        #[arg(long, conflicts_with = "expert")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a checkpoint.
        #[arg(long)]
        expert: bool,
        /// Explicit held-out scene seeds.
        #[arg(long, value_delimiter = ',')]
        scene_seeds: Option<Vec<u64>>,
    },
    /// Run the tabular certification sweep.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seeds) = &common.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    let out = cfg.out_dir.clone();
    Ok((cfg, out))
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CollectExpert { common } => {
            let (cfg, out) = load(&common)?;
            print_json(&run_collect_expert(&cfg, &out)?);
        }
        Command::Train { common, algo, sweep } => {
            let (cfg, out) = load(&common)?;
            if sweep {
                if algo != Algo::Bc {
                    return Err(HarnessError::Config("--sweep is only defined for --algo bc".into()));
                }
                print_json(&run_bc_sweep(&cfg, &out)?);
            } else {
                print_json(&run_train(&cfg, algo, &out)?);
            }
        }
        Command::Eval { common, checkpoint, expert, scene_seeds } => {
            let (cfg, out) = load(&common)?;
            let target = match (&checkpoint, expert) {
                (Some(path), false) => EvalTarget::Checkpoint(path),
                (None, true) => EvalTarget::Expert { noise_std: cfg.expert.noise_std },
                _ => return Err(HarnessError::Config("pass exactly one of --checkpoint or --expert".into())),
            };
            print_json(&run_eval(&cfg, target, scene_seeds, &out)?);
        }
        Command::VerifyTheory { common, inject_fault } => {
            let (cfg, out) = load(&common)?;
            let kernels = match inject_fault {
                Some(Fault::NegateChi2) => Kernels::negated_chi2(),
                None => Kernels::default(),
            };
            match run_verify_theory(&cfg, &kernels, &out) {
                Ok(report) => print_json(&report),
                Err(e) => {
                    if let Ok(text) = fs::read_to_string(out.join("theory.json")) {
                        println!("{text}");
                    }
                    return Err(e);
                }
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
