use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncs_cli::commands;
use ncs_cli::config::{BenchConfig, ExperimentConfig};
use ncs_cli::error::CliError;
use ncs_cli::io;
use ncs_core::codec::{CodecParams, PriorRegistry};

#[derive(Parser)]
#[command(name = "ncs", version, about = "Noise combination sampling experiments")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Added to every seed in the config.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Unconditional samples and their moments.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the solver grid and write one metric row per (seed, solver, T).
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Encode a raw f64 signal.
    Compress {
        /// Codec parameters as JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the encoder-side reconstruction.
        #[arg(long)]
        recon: Option<PathBuf>,
    },
    /// Decode a bitstream into a raw f64 signal.
    Decompress {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the weight quantizers against each other.
    BenchQuant {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(path: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::parse(&io::read_text(path)?).map_err(|e| match e {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let registry = PriorRegistry::builtin();
    match cli.command {
        Command::Sample { config, out } => commands::sample(&experiment(&config)?, out.as_deref(), cli.seed_offset),
        Command::Solve { config, out } => commands::solve_cmd(&experiment(&config)?, out.as_deref(), cli.seed_offset),
        Command::Compress { config, input, out, recon } => {
            let mut params: CodecParams = serde_json::from_str(&io::read_text(&config)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
            params.seed = params.seed.wrapping_add(cli.seed_offset);
            println!("{}", commands::compress(&params, &input, &out, recon.as_deref(), &registry)?);
            Ok(())
        }
        Command::Decompress { input, out } => {
            println!("{}", commands::decompress(&input, &out, &registry)?);
            Ok(())
        }
        Command::BenchQuant { config, out } => {
            let config = match config {
                Some(path) => BenchConfig::parse(&io::read_text(&path)?)?,
                None => BenchConfig::default(),
            };
            commands::bench_quant(&config, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ncs: {e}");
            e.exit_code()
        }
    }
}
