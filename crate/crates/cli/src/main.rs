//! `persona-steer`: the pipeline from survey responses to steered answers.

mod commands;
mod config;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use persona_steer::error::Result;
use persona_steer::eval::{BaselineKind, SweepK};
use persona_steer::lm::PrefixMode;
use persona_steer::persona::PersonaKind;

use commands::EvalRequest;
use config::PipelineConfig;
use workspace::Workspace;

#[derive(Parser)]
#[command(
    name = "persona-steer",
    version,
    about = "Persona embeddings from survey responses and soft-prompt steering"
)]
struct Cli {
    /// TOML pipeline configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stage (overrides the file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory (overrides the file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the planted synthetic survey into the artifact directory.
    GenSynthetic,
    /// Four-way split into train/validation individuals and responses.
    Split,
    /// Fit individual and question embeddings on the training responses.
    FitCf,
    /// Elbow scan and k-means over the individual embeddings.
    Cluster {
        /// Cluster count instead of the elbow pick.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Disagreement reports and demographic composition of the clusters.
    Analyze,
    /// Pretrain and freeze the answer model.
    PretrainLm,
    /// Train the soft-prompt model against the frozen answer model.
    TrainSpm {
        /// prefix or prompt; defaults to `spm.mode`.
        #[arg(long)]
        mode: Option<PrefixMode>,
    },
    /// Baselines and steered accuracy on held-out responses.
    Eval {
        /// Only this baseline: raw, demo or context.
        #[arg(long)]
        baseline: Option<BaselineKind>,
        /// Only this persona kind: individual, cluster or demographic.
        #[arg(long, value_parser = commands::persona_kind)]
        persona: Option<PersonaKind>,
        /// Which trained soft-prompt model to steer with.
        #[arg(long)]
        mode: Option<PrefixMode>,
        /// Context pairs for the context baseline.
        #[arg(long)]
        context_k: Option<usize>,
    },
    /// Embed the validation individuals from K of their responses.
    EmbedUnseen {
        /// Responses per individual, or `all`.
        #[arg(long, default_value = "all")]
        k: SweepK,
    },
    /// Unseen-individual sweep over K and cluster-count sweep.
    Sweep {
        /// Which trained soft-prompt model to steer with.
        #[arg(long)]
        mode: Option<PrefixMode>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic => "gen-synthetic",
            Command::Split => "split",
            Command::FitCf => "fit-cf",
            Command::Cluster { .. } => "cluster",
            Command::Analyze => "analyze",
            Command::PretrainLm => "pretrain-lm",
            Command::TrainSpm { .. } => "train-spm",
            Command::Eval { .. } => "eval",
            Command::EmbedUnseen { .. } => "embed-unseen",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Command::Cluster { k: Some(k) } = cli.command {
        config.cluster.k = Some(k);
    }
    let default_mode = config.spm.mode;
    let mut ws = Workspace::new(config, cli.command.name())?;
    match cli.command {
        Command::GenSynthetic => commands::gen_synthetic(&mut ws)?,
        Command::Split => commands::split(&mut ws)?,
        Command::FitCf => commands::fit_cf(&mut ws)?,
        Command::Cluster { .. } => commands::cluster(&mut ws)?,
        Command::Analyze => commands::analyze(&mut ws)?,
        Command::PretrainLm => commands::pretrain_lm(&mut ws)?,
        Command::TrainSpm { mode } => commands::train_spm_cmd(&mut ws, mode.unwrap_or(default_mode))?,
        Command::Eval {
            baseline,
            persona,
            mode,
            context_k,
        } => {
            let request = EvalRequest {
                baseline,
                persona,
                mode: mode.unwrap_or(default_mode),
                context_k: context_k.unwrap_or(ws.config.eval.context_k),
            };
            commands::eval(&mut ws, &request)?
        }
        Command::EmbedUnseen { k } => commands::embed_unseen_cmd(&mut ws, k)?,
        Command::Sweep { mode } => commands::sweep(&mut ws, mode.unwrap_or(default_mode))?,
    }
    ws.finish()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PERSONA_STEER_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
