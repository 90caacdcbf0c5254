use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emo_core::cli::{cmd_fit, cmd_plan, cmd_report, cmd_train, PlanArgs};

#[derive(Parser)]
#[command(
    name = "emo",
    about = "Desk-scale laboratory for progressive expert-pool expansion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the joint sparsity scaling law to a loss-observation file.
    Fit {
        /// CSV of n_act,e,d,loss rows.
        #[arg(long)]
        observations: PathBuf,
        /// Where to write the fitted parameters and fit report.
        #[arg(long)]
        out: PathBuf,
        /// Seed for the multi-start optimizer.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Turn a fitted law (or published cumulative optima) into a stage schedule.
    Plan {
        /// Fitted-parameter file, as written by `emo fit`.
        #[arg(long, conflicts_with = "cumulatives")]
        law_params: Option<PathBuf>,
        /// Activated parameter count the schedule is planned for.
        #[arg(long)]
        n_act: Option<f64>,
        /// Comma-separated cumulative compute-optimal token counts, one per stage.
        #[arg(long, value_delimiter = ',')]
        cumulatives: Option<Vec<f64>>,
        /// Comma-separated expert counts, one per stage, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        experts: Vec<u32>,
        /// Total token budget to split across stages.
        #[arg(long)]
        d_total: f64,
        /// Where to write the schedule CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a training config end to end, leaving a checksummed run directory.
    Train {
        /// Sectioned key = value run config.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config's [train] section.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate one or more run directories into a comparison file.
    Report {
        /// Run directories, each holding a manifest and metrics stream.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the comparison CSV.
        #[arg(long)]
        out: PathBuf,
        /// Trailing window, in steps, for the final smoothed loss.
        #[arg(long, default_value_t = 500)]
        smooth: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit {
            observations,
            out,
            seed,
        } => cmd_fit(&observations, &out, seed).map(|_| ()),
        Command::Plan {
            law_params,
            n_act,
            cumulatives,
            experts,
            d_total,
            out,
        } => cmd_plan(&PlanArgs {
            law_params,
            n_act,
            cumulatives,
            experts,
            d_total,
            out,
        })
        .map(|_| ()),
        Command::Train { config, seed } => cmd_train(&config, seed).map(|_| ()),
        Command::Report { runs, out, smooth } => cmd_report(&runs, &out, smooth).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emo: {e}");
            ExitCode::FAILURE
        }
    }
}
