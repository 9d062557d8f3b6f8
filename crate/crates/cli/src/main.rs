use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clhpo_core::runner::{self, ExecOptions, ReportRow};
use clhpo_core::{hpo, neural, Error};

/// Hyperparameter selection frameworks for continual learning.
#[derive(Parser)]
#[command(name = "clhpo", version)]
struct Cli {
    /// Worker threads for runs and trials. 1 runs everything serially.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute every (method, framework, seed) run of a config file.
    Run {
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Results directory, overriding the config's `output`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write each run's final replay buffer as CSV.
        #[arg(long)]
        dump_buffer: bool,
    },
    /// Aggregate a results directory into comparison.csv.
    Report {
        dir: PathBuf,
        /// Where to write the table. Defaults to DIR/comparison.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on random cases.
    GradCheck {
        #[arg(long, default_value_t = 50)]
        cases: usize,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Count training invocations per framework and compare with the closed forms.
    LedgerCheck,
}

/// Exit code for a run where some but not all entries failed.
const PARTIAL_FAILURE: u8 = 2;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let jobs = cli.jobs.unwrap_or(0);
    if jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    match dispatch(cli.command, jobs != 1) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command, parallel: bool) -> Result<ExitCode, Error> {
    match command {
        Command::Run {
            config,
            seed_override,
            output,
            dump_buffer,
        } => {
            let mut plan = runner::parse_config(&config)?;
            if let Some(seed) = seed_override {
                plan.seeds = vec![seed];
            }
            if let Some(dir) = output {
                plan.output = dir;
            }
            log::info!("{} runs into {}", plan.runs().len(), plan.output.display());
            let index = runner::execute(&plan, ExecOptions { parallel, dump_buffer })?;
            let failed = index.failures();
            for e in index.runs.iter().filter(|e| e.status != "ok") {
                eprintln!(
                    "failed: {}__{}__seed{}: {}",
                    e.method,
                    e.framework,
                    e.seed,
                    e.error.as_deref().unwrap_or("unknown error")
                );
            }
            println!("{} of {} runs succeeded", index.runs.len() - failed, index.runs.len());
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(PARTIAL_FAILURE)
            })
        }
        Command::Report { dir, output } => {
            let (path, rows) = runner::report(&dir, output.as_deref())?;
            print_report(&rows);
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::GradCheck {
            cases,
            eps,
            seed,
            tolerance,
        } => {
            let checks = neural::gradient_check(cases, eps, seed)?;
            let mut ok = true;
            println!("{:<22} {:>6} {:>14} {:>8}", "loss", "cases", "max_rel_err", "skipped");
            for c in &checks {
                ok &= c.max_relative_error < tolerance;
                println!(
                    "{:<22} {:>6} {:>14.3e} {:>8}",
                    c.loss.name(),
                    c.cases,
                    c.max_relative_error,
                    c.skipped
                );
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::LedgerCheck => {
            let checks = hpo::ledger_sweep(&[1, 3, 10], &[1, 2, 5])?;
            println!("{:<16} {:>3} {:>3} {:>9} {:>9}", "framework", "K", "T", "measured", "expected");
            let mut ok = true;
            for c in &checks {
                ok &= c.measured == c.expected;
                println!(
                    "{:<16} {:>3} {:>3} {:>9} {:>9}",
                    c.framework.name(),
                    c.k,
                    c.t,
                    c.measured,
                    c.expected
                );
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn print_report(rows: &[ReportRow]) {
    let cell = |mean: f64, se: Option<f64>, bold: bool| {
        let se = se.map_or(String::new(), |s| format!(" ± {:.2}", 100.0 * s));
        let mark = if bold { "*" } else { "" };
        format!("{:.2}{se}{mark}", 100.0 * mean)
    };
    println!(
        "{:<8} {:<16} {:>5} {:>18} {:>18} {:>8}",
        "method", "framework", "runs", "class-IL", "task-IL", "units"
    );
    for r in rows {
        println!(
            "{:<8} {:<16} {:>5} {:>18} {:>18} {:>8.1}",
            r.method.to_string(),
            r.framework.name(),
            r.n_runs,
            cell(r.class_il_mean, r.class_il_se, r.bold_class_il),
            cell(r.task_il_mean, r.task_il_se, r.bold_task_il),
            r.ledger_total_mean
        );
    }
}
