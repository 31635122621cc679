//! Command-line pipeline: corpus generation, training, explanation and
//! evaluation over checkpoint and JSON artifacts.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "tve", version, about = "Transferable patch attributions for frozen encoders")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `--set pretraining.steps=100`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub backbone: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub explainer: Option<PathBuf>,
    #[arg(long, global = true)]
    pub mode: Option<String>,
    #[arg(long, global = true)]
    pub task: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus.
    GenData {
        #[arg(long)]
        force: bool,
    },
    /// Train the backbone and its general head on the quadrant corpus.
    TrainBackbone,
    /// Tune a task head on the frozen backbone.
    FinetuneHead,
    /// Fine-tune encoder and head together.
    FinetuneFull,
    /// Train the explainer on backbone meta-attributions.
    PretrainExplainer {
        /// Continue from `paths.explainer`.
        #[arg(long)]
        init: bool,
    },
    /// Adapt the explainer to a fine-tuned encoder.
    FinetuneExplainer {
        /// Start from a fresh explainer instead of `paths.explainer`.
        #[arg(long)]
        scratch: bool,
    },
    /// Write one heatmap per image.
    Explain,
    /// Fidelity AUCs for one mode.
    Evaluate,
    /// Check the explanation-error bound.
    VerifyBound,
    /// Correlate two-state and sampled attributions.
    Correlate,
    /// Measure explanation throughput.
    Bench,
}

impl GlobalArgs {
    /// Dedicated flags as `key=value` assignments, applied after `--set`.
    fn flag_sets(&self) -> Vec<String> {
        let json = |v: &str| serde_json::Value::String(v.to_string()).to_string();
        let path = |p: &PathBuf| json(&p.to_string_lossy());
        let mut out = self.sets.clone();
        if let Some(s) = self.seed {
            out.push(format!("seed={s}"));
        }
        for (key, p) in [
            ("paths.out", &self.out),
            ("paths.data", &self.data),
            ("paths.backbone", &self.backbone),
            ("paths.model", &self.model),
            ("paths.explainer", &self.explainer),
        ] {
            if let Some(p) = p {
                out.push(format!("{key}={}", path(p)));
            }
        }
        if let Some(m) = &self.mode {
            out.push(format!("mode={}", json(m)));
        }
        if let Some(t) = &self.task {
            out.push(format!("task={}", json(t)));
        }
        out
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let env_seed = std::env::var("TVE_SEED").ok();
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), env_seed.as_deref(), &cli.global.flag_sets())?;
    match cli.command {
        Command::GenData { force } => commands::gen_data(&cfg, force),
        Command::TrainBackbone => commands::train_backbone(&cfg),
        Command::FinetuneHead => commands::finetune_head(&cfg),
        Command::FinetuneFull => commands::finetune_full(&cfg),
        Command::PretrainExplainer { init } => commands::pretrain_explainer(&cfg, init),
        Command::FinetuneExplainer { scratch } => commands::finetune_explainer(&cfg, scratch),
        Command::Explain => commands::explain(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::VerifyBound => commands::verify_bound(&cfg),
        Command::Correlate => commands::correlate(&cfg),
        Command::Bench => commands::bench(&cfg),
    }
}
