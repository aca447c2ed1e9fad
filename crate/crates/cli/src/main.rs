mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "binderdiff", version, about = "Joint sequence-structure diffusion for protein binder design")]
pub struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter structure files into complex records.
    Curate(CurateArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Generate binders for target records.
    Sample(SampleArgs),
    /// Score candidates and print the top-k table.
    Eval(EvalArgs),
    /// Summarize a checkpoint, record file or metrics log.
    Inspect(InspectArgs),
    /// Run the numerical self-checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
pub struct CurateArgs {
    /// Directory of structure files (every regular file is read).
    #[arg(long, required_unless_present = "toy")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also cut pseudo-complexes from single-chain entries.
    #[arg(long)]
    pub pseudo: bool,
    /// Write COUNT synthetic toy complexes instead of reading structures.
    #[arg(long, value_name = "COUNT", conflicts_with = "input")]
    pub toy: Option<usize>,
    /// Toy binder length range, `min,max`.
    #[arg(long, default_value = "12,24")]
    pub toy_lengths: String,
    /// `sequence-hash<TAB>cluster-id` file; enables the train/valid/test split.
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    /// Split ratios, `train,valid,test`.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pub ratios: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long, conflicts_with = "toy")]
    pub config: Option<PathBuf>,
    /// Train on the synthetic toy corpus with toy settings.
    #[arg(long)]
    pub toy: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training records (overrides `paths.data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `paths.out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the default configuration and exit.
    #[arg(long)]
    pub dump_defaults: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Records whose target chains are designed against; the binder chain
    /// supplies the default length.
    #[arg(long)]
    pub targets: PathBuf,
    /// Candidates per target.
    #[arg(long, default_value_t = 10)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = OnOff::On)]
    pub guidance: OnOff,
    #[arg(long)]
    pub n_init: Option<usize>,
    #[arg(long)]
    pub k_guid: Option<usize>,
    /// Binder length for every target.
    #[arg(long)]
    pub length: Option<usize>,
    /// Fragment library for sequence guidance.
    #[arg(long)]
    pub fragments: Option<PathBuf>,
    /// Candidate records; metadata goes to `<out>.meta.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Candidate records with ids `<target>#cNNNN`.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Reference complexes, one per target id.
    #[arg(long)]
    pub references: PathBuf,
    /// Score file: `id iptm ptm pae plddt` per line.
    #[arg(long, group = "scorer")]
    pub scores: Option<PathBuf>,
    /// Shell command run once per candidate with its record on stdin; it must
    /// print `iptm ptm pae plddt`.
    #[arg(long, group = "scorer")]
    pub scorer_cmd: Option<String>,
    /// Use the built-in geometric stand-in scorer.
    #[arg(long, group = "scorer")]
    pub synthetic_scorer: bool,
    /// `id score` lines for candidates and references (lower is better).
    #[arg(long)]
    pub comparative: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub k: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    FxSign,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    /// Run the reduced suite.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("binderdiff: error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Curate(a) => commands::curate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Selfcheck(a) => commands::selfcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("binderdiff: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
