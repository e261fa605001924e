use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xlstm_distill::harness::commands;
use xlstm_distill::harness::RunConfig;
use xlstm_distill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "xlstm-distill",
    version,
    about = "Distil a small transformer into an xLSTM student"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on next-token prediction.
    PretrainTeacher(Common),
    /// Distil the student from a teacher checkpoint.
    Distill(Common),
    /// Print the annealing schedule of the configured run.
    Schedule(Common),
    /// Check analytic gradients against finite differences.
    Gradcheck(Common),
    /// Time forward passes across sequence lengths.
    Benchmark(Common),
    /// Evaluate teacher and student checkpoints on held-out text.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// KEY=VALUE config override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::PretrainTeacher(c) => {
            let cfg = c.load()?;
            let outcome = commands::pretrain(&cfg, &c.out)?;
            let last = outcome.trace.last().copied().unwrap_or(f64::NAN);
            eprintln!(
                "teacher: {} steps, final loss {last:.4}, vocab {}, wrote {}",
                outcome.trace.len(),
                outcome.corpus.vocab.size(),
                c.out.join(commands::TEACHER_FILE).display()
            );
        }
        Command::Distill(c) => {
            let cfg = c.load()?;
            let outcome = commands::distill(&cfg, &c.out)?;
            eprintln!(
                "student: {} optimizer steps, trainable fraction {:.4}, wrote {}",
                outcome.summary.optimizer_steps,
                outcome.trainable_fraction,
                c.out.join(commands::METRICS_FILE).display()
            );
        }
        Command::Schedule(c) => {
            let cfg = c.load()?;
            let rows = commands::schedule_to(&cfg, &c.out)?;
            commands::print_jsonl(&mut stdout, &rows)?;
        }
        Command::Gradcheck(c) => {
            let cfg = c.load()?;
            let rows = commands::gradcheck_to(&cfg, &c.out)?;
            for r in &rows {
                let status = if r.passed { "ok" } else { "FAIL" };
                writeln!(
                    stdout,
                    "{:<14} max_rel_err {:.3e}  {status}",
                    r.component, r.max_rel_err
                )
                .map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })?;
            }
            return Ok(rows.iter().all(|r| r.passed));
        }
        Command::Benchmark(c) => {
            let cfg = c.load()?;
            let report = commands::benchmark_to(&cfg, &c.out)?;
            commands::print_jsonl(&mut stdout, &report.rows)?;
            commands::print_jsonl(&mut stdout, &report.slopes)?;
        }
        Command::Eval(c) => {
            let cfg = c.load()?;
            let report = commands::eval(&cfg, &c.out)?;
            commands::print_jsonl(&mut stdout, std::slice::from_ref(&report))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
