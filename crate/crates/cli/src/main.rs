//! `hair`: train, run and verify hypernetwork restoration models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hair::checks::Suite;

#[derive(Parser)]
#[command(name = "hair", version, about = "All-in-one image restoration with kernel-selecting transformer blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config; writes a checkpoint and a CSV metric log.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Restore one image file.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Per-degradation PSNR/SSIM of restored images as CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        source: commands::SampleSource,
        /// Also report the metrics of the unrestored inputs.
        #[arg(long)]
        baseline: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the global information vector of every sample as CSV.
    Giv {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        source: commands::SampleSource,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the numerical property suites.
    Check {
        #[arg(long, default_value = "all")]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SuiteArg {
    Distributivity,
    Gradients,
    Invariants,
    All,
}

impl SuiteArg {
    fn suites(self) -> Vec<Suite> {
        match self {
            Self::Distributivity => vec![Suite::Distributivity],
            Self::Gradients => vec![Suite::Gradients],
            Self::Invariants => vec![Suite::Invariants],
            Self::All => Suite::ALL.to_vec(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => commands::train(&config),
        Command::Restore { ckpt, input, output } => commands::restore(&ckpt, &input, &output),
        Command::Eval {
            ckpt,
            source,
            baseline,
            out,
        } => commands::eval(&ckpt, &source, baseline, out.as_deref()),
        Command::Giv { ckpt, source, out } => commands::giv(&ckpt, &source, out.as_deref()),
        Command::Check { suite, seed } => commands::check(&suite.suites(), seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
