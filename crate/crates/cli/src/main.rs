use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use lpsr_cli::args::{Cli, Command};
use lpsr_cli::commands::{cmd_calibrate, cmd_eval, cmd_export_basis, cmd_run, cmd_sweep, EvalOptions};

/// Environment variable fixing the worker-thread count.
const WORKERS_ENV: &str = "LPSR_WORKERS";

fn init_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    match cli.command {
        Command::Calibrate(a) => {
            let r = cmd_calibrate(&a.resolve()?)?;
            println!(
                "calibration: {} problems, {} wrong, {} deltas -> {} basis vectors, inertia {:.6}",
                r.problems, r.wrong, r.deltas, r.basis_count, r.inertia
            );
            println!("basis written to {}", r.path.display());
        }
        Command::Run(a) => {
            let r = cmd_run(&a.resolve()?)?;
            let s = &r.summary;
            println!(
                "{} problems, accuracy {:.4}, mean token cost {:.2}, rollback rate {:.4}, mean rollbacks {:.4}",
                s.problems, s.accuracy, s.mean_token_cost, s.rollback_rate, s.mean_rollbacks
            );
            println!("traces: {}, summary: {}", r.traces.display(), r.summary_csv.display());
        }
        Command::Eval(a) => {
            let opts = EvalOptions {
                output_dir: a.output_dir,
                tag: a.tag,
                resamples: a.resamples,
                confidence: a.confidence,
                seed: a.seed,
            };
            let r = cmd_eval(&a.traces_a, &a.traces_b, &opts)?;
            print!("{}", r.render());
        }
        Command::Sweep(a) => {
            let r = cmd_sweep(&a.run.resolve()?, a.axis.into())?;
            println!("{} rows written to {} and {}", r.rows, r.csv.display(), r.jsonl.display());
            for b in &r.bases {
                println!("basis written to {}", b.display());
            }
        }
        Command::ExportBasis(a) => {
            let r = cmd_export_basis(&a.basis, &a.output_dir)?;
            println!(
                "{} vectors (max norm error {:.2e}) -> {} and {}",
                r.count,
                r.max_norm_error,
                r.cosines.display(),
                r.vectors.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
