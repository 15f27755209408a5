//! Thin command-line front end. All behavior lives in the library; this
//! binary parses flags, dispatches, prints, and maps errors to exit codes:
//! 2 config, 3 divergence, 4 format, 5 equivalence, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use autosize::commands::{
    cmd_prox_bench, cmd_prune, cmd_replay, cmd_report, cmd_search, cmd_train, run_root,
};
use autosize::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "autosize",
    about = "Group-sparse auto-sizing for sequence transducers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the serial and parallel row-max prox routes against each other.
    ProxBench {
        /// Row lengths to benchmark.
        #[arg(long, value_delimiter = ',', default_value = "16,256,4096,65536")]
        sizes: Vec<usize>,
        /// Random instances per row length.
        #[arg(long, default_value_t = 10)]
        trials: usize,
        /// Worker threads for the parallel route.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train per the config file, one run directory per coefficient.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run-directory root; defaults to $AUTOSIZE_RUN_ROOT or ./runs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured search campaign into one run directory.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drop dead feed-forward units from a checkpoint and verify the
    /// pruned model matches the original on random probes.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Where the prune report records go.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Consolidate train-run directories into a comparison matrix.
    Report {
        /// Run directories written by `train`.
        dirs: Vec<PathBuf>,
    },
    /// Re-run a finished run from its manifest and compare artifacts.
    Replay {
        #[arg(long)]
        run: PathBuf,
        /// Scratch root for the replayed run; defaults to a temp dir.
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> autosize::Result<()> {
    match cli.command {
        Command::ProxBench {
            sizes,
            trials,
            workers,
        } => {
            let rows = cmd_prox_bench(&sizes, trials, workers)?;
            println!(
                "{:>10} {:>8} {:>12} {:>12} {:>8} {:>7} {:>10}",
                "n", "workers", "serial_ns", "parallel_ns", "speedup", "passes", "agreement"
            );
            for row in rows {
                println!(
                    "{:>10} {:>8} {:>12} {:>12} {:>8.3} {:>7} {:>10}",
                    row.n,
                    row.workers,
                    row.serial_ns,
                    row.parallel_ns,
                    row.speedup,
                    row.pass_count,
                    row.agreement
                );
            }
            Ok(())
        }
        Command::Train { config, out } => {
            let config = RunConfig::load(&config)?;
            let root = run_root(out);
            let summaries = cmd_train(&config, &root)?;
            for run in summaries {
                println!(
                    "{}: dev_ppl={:.4} test_seq_acc={:.4} zero_rows={:.1}% -> {}",
                    run.label,
                    run.best_dev_ppl,
                    run.test_seq_accuracy,
                    run.zero_row_fraction * 100.0,
                    run.dir.display()
                );
            }
            Ok(())
        }
        Command::Search { config, out } => {
            let config = RunConfig::load(&config)?;
            let dir = run_root(out).join("search");
            let outcome = cmd_search(&config, &dir)?;
            for trial in &outcome.trials {
                println!(
                    "trial={} arm={} dev_ppl={:.4} test_seq_acc={:.4} params={} seconds={:.2}",
                    trial.trial,
                    trial.arm.name(),
                    trial.dev_ppl,
                    trial.test_seq_accuracy,
                    trial.parameter_count,
                    trial.seconds
                );
            }
            for failure in &outcome.failures {
                println!(
                    "trial={} arm={} diverged: {}",
                    failure.trial,
                    failure.arm.name(),
                    failure.message
                );
            }
            println!(
                "cumulative_seconds={:.2} -> {}",
                outcome.cumulative_seconds,
                dir.display()
            );
            Ok(())
        }
        Command::Prune {
            checkpoint,
            output,
            report,
            probes,
        } => {
            let (summary, worst) = cmd_prune(&checkpoint, &output, &report, probes)?;
            let units: usize = summary.rows_dropped.values().sum();
            println!(
                "{} units removed, params {} -> {}, max logit diff {:.2e}",
                units, summary.params_before, summary.params_after, worst
            );
            if !summary.removed_sublayers.is_empty() {
                println!(
                    "sublayers removed: {}",
                    summary.removed_sublayers.join(", ")
                );
            }
            Ok(())
        }
        Command::Report { dirs } => {
            let out = cmd_report(&dirs)?;
            for warning in &out.warnings {
                eprintln!("warning: {warning}");
            }
            print!("{}", out.text);
            Ok(())
        }
        Command::Replay { run, scratch } => {
            let scratch = match scratch {
                Some(dir) => dir,
                None => {
                    std::env::temp_dir().join(format!("autosize-replay-{}", std::process::id()))
                }
            };
            cmd_replay(&run, &scratch)?;
            println!("replay of {} matches", run.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
