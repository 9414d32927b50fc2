//! Command line front end: dataset ingestion and generation, initial and
//! continual training, the experiment scenarios, and per-packet labeling.
//!
//! Every command prints a one-line JSON summary on stdout and writes its
//! artifacts (containers, checkpoints, metric files) to paths given by
//! flags. Exit codes: 0 on success, 2 on configuration errors (including
//! bad flags), 3 on data errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use driftwatch_core::scenario::{ArchPreset, ModelKind};

#[derive(Parser)]
#[command(name = "driftwatch", version, about = "Adaptive flow-matrix intrusion detection")]
struct Cli {
    /// JSON scenario configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed, overriding the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory; each command documents which.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Serialize federated scheduling so reruns are bit-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModelArg {
    Cnn,
    Lstm,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> ModelKind {
        match m {
            ModelArg::Cnn => ModelKind::Cnn,
            ModelArg::Lstm => ModelKind::Lstm,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Compact,
    Full,
}

impl From<PresetArg> for ArchPreset {
    fn from(p: PresetArg) -> ArchPreset {
        match p {
            PresetArg::Compact => ArchPreset::Compact,
            PresetArg::Full => ArchPreset::Full,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a pcap capture into a labeled flow-matrix container (--out).
    Ingest {
        /// Classic pcap capture file.
        #[arg(long)]
        pcap: PathBuf,
        /// CSV labeling rules; without them every flow is benign.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Idle gap that splits a conversation into two flows.
        #[arg(long, default_value_t = driftwatch_core::ingest::DEFAULT_IDLE_TIMEOUT_US)]
        idle_timeout_us: u64,
        /// Error on flows no rule matches instead of labeling them benign.
        #[arg(long)]
        strict: bool,
    },
    /// Generate a synthetic labeled corpus into a container (--out).
    Synth {
        /// Total classes including benign.
        #[arg(long, default_value_t = 3)]
        classes: u32,
        /// Flows per class.
        #[arg(long, default_value_t = 200)]
        flows: u32,
        /// Benign flow count when it should exceed --flows.
        #[arg(long)]
        benign: Option<u32>,
    },
    /// Train an initial detector on one known class (checkpoint to --out).
    TrainInitial {
        /// Labeled flow-matrix container.
        #[arg(long)]
        data: PathBuf,
        /// Known attack class name; defaults to the first attack class.
        #[arg(long)]
        known: Option<String>,
        #[arg(long, value_enum, default_value = "cnn")]
        model: ModelArg,
        #[arg(long, value_enum, default_value = "compact")]
        preset: PresetArg,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Held-out flows per class for the metrics report.
        #[arg(long, default_value_t = 60)]
        eval_per_class: usize,
    },
    /// Expand a trained detector with one new attack class.
    ContinualUpdate {
        /// Checkpoint with importance weights, from train-initial.
        #[arg(long)]
        model: PathBuf,
        /// Container holding the new class plus benign flows.
        #[arg(long)]
        new: PathBuf,
        /// Units added to each hidden dense layer.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Validation detection rate below which full retraining runs.
        #[arg(long)]
        tau: Option<f64>,
        /// Sample pool directory for balancing against earlier classes;
        /// the fresh flows are folded in and the pools saved back.
        #[arg(long)]
        pools: Option<PathBuf>,
    },
    /// Run the multi-agent federated scenario (artifacts into --out dir).
    Federate,
    /// Label flows packet by packet with a recurrent checkpoint.
    Seqlabel {
        /// Recurrent checkpoint, from train-initial --model lstm.
        #[arg(long)]
        model: PathBuf,
        /// Labeled flow-matrix container to label.
        #[arg(long)]
        data: PathBuf,
        /// Attack probability at which a flow is flagged.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Packets to observe before the rule may fire.
        #[arg(long, default_value_t = 1)]
        min_packets: usize,
        /// Also write one CSV row per flow to this path.
        #[arg(long)]
        decisions: Option<PathBuf>,
    },
    /// Run the scenario named in --config and write its metric tables.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let overrides = commands::Overrides {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        deterministic: cli.deterministic,
    };
    let result = match cli.cmd {
        Cmd::Ingest { pcap, rules, idle_timeout_us, strict } => {
            commands::ingest(&overrides, &pcap, rules.as_deref(), idle_timeout_us, strict)
        }
        Cmd::Synth { classes, flows, benign } => {
            commands::synth(&overrides, classes, flows, benign)
        }
        Cmd::TrainInitial { data, known, model, preset, epochs, batch, eval_per_class } => {
            commands::train_initial(
                &overrides,
                &data,
                known,
                model.into(),
                preset.into(),
                epochs,
                batch,
                eval_per_class,
            )
        }
        Cmd::ContinualUpdate { model, new, k, epochs, tau, pools } => {
            commands::continual_update(&overrides, &model, &new, k, epochs, tau, pools.as_deref())
        }
        Cmd::Federate => commands::federate(&overrides),
        Cmd::Seqlabel { model, data, threshold, min_packets, decisions } => {
            commands::seqlabel(&overrides, &model, &data, threshold, min_packets, decisions.as_deref())
        }
        Cmd::Report => commands::report(&overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
