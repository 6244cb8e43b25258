mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Dual-stream transformer: tokenizer and model training, evaluation and
/// diagnostics.
#[derive(Parser, Debug)]
#[command(name = "dstf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a byte-level BPE tokenizer.
    BpeTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Validation loss of a checkpoint.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
    },
    /// Loss under attention amplification over a grid of alphas, plus AUC.
    SweepAlpha {
        #[command(flatten)]
        eval: EvalArgs,
        /// Comma-separated, strictly ascending.
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 4.0, 8.0, 16.0])]
        alphas: Vec<f64>,
        /// Also dump per-head attention maps of the first window per alpha.
        #[arg(long)]
        dump_attn: bool,
    },
    /// Stream ablations: zeroed token stream, zeroed context stream and
    /// random-token embeddings.
    Ablate {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, env = "DSTF_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Write the learned head-routing matrices of every Kronecker site.
    ExportRouting {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Head specialization score and attention entropy per layer and head.
    Specialize {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Continue a prompt.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        /// Sampling temperature; 0 is greedy.
        #[arg(long, default_value_t = 0.0)]
        temp: f64,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, env = "DSTF_SEED", default_value_t = 0)]
        seed: u64,
        /// Also write the continuation to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Extra `key=value` overrides with dotted keys, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Mixing signature, e.g. kron-kron/dns-dns.
    #[arg(long)]
    mixing: Option<String>,
    /// Stream mode: ss, tf or fts.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    gated: bool,
    /// Enable per-layer supervision with this schedule (uniform, linear or
    /// exponential).
    #[arg(long)]
    supervision: Option<String>,
    /// Supervision coefficient.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Seeds both initialization and batch order.
    #[arg(long, env = "DSTF_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Text to evaluate on, tokenized with the checkpoint's tokenizer.
    #[arg(long)]
    data: PathBuf,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Window length; defaults to the training run's.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Cap on evaluated windows; defaults to the training run's.
    #[arg(long)]
    max_windows: Option<usize>,
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
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
