mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

// Training allocates many short-lived matrices; the system allocator spends
// much of its time returning them to the kernel.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "topoimb", version, about = "Topology-imbalance experiments for graph neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Named configuration: imbnode-paper or imbgraph-paper.
    #[arg(long)]
    pub preset: Option<String>,
    /// Run a single seed instead of the configured list.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Benchmark {
    Imbnode,
    Imbgraph,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Axis {
    K,
    Alpha,
    R,
    Backbone,
    Strategy,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark.
    GenData {
        benchmark: Benchmark,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator configuration (JSON); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train every seed and write metrics, histories and checkpoints.
    Train(Common),
    /// Repeat the multi-seed run for each value of one setting.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values; defaults depend on the axis.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<String>>,
    },
    /// Per-epoch mean weight and training accuracy of each topology group.
    WeightTrace {
        #[command(flatten)]
        common: Common,
        /// Keep only these epochs.
        #[arg(long, value_delimiter = ',')]
        epochs: Option<Vec<usize>>,
    },
    /// Mean template selection of each topology group at the last extractor layer.
    TemplateTrace {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem written by `train`; trains the first seed when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pseudo topology labels of a dataset.
    PseudoLabels(Common),
    /// Simulations of the region-model results.
    TheoryCheck {
        #[arg(long, default_value = "theory")]
        out: PathBuf,
        /// Seeds per imbalance ratio.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            benchmark,
            seed,
            config,
            out,
        } => commands::gen_data(benchmark, seed, config.as_deref(), &out),
        Command::Train(common) => commands::train(&common),
        Command::Sweep { common, axis, values } => commands::sweep(&common, axis, values),
        Command::WeightTrace { common, epochs } => commands::weight_trace(&common, epochs),
        Command::TemplateTrace { common, checkpoint } => commands::template_trace(&common, checkpoint.as_deref()),
        Command::PseudoLabels(common) => commands::pseudo_labels(&common),
        Command::TheoryCheck { out, seeds, steps, lr } => commands::theory_check(&out, seeds, steps, lr),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
