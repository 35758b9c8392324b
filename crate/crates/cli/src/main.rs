use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quadmech_cli::config::RunConfig;
use quadmech_cli::{audit_cmd, report, run, CliError};

#[derive(Parser)]
#[command(
    name = "quadmech",
    version,
    about = "Private fine-tuning with the quadratic exponential mechanism"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model on the pretraining data and write a checkpoint.
    Pretrain(Common),
    /// Sweep the mechanism over (ε, R, p̃) from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to `checkpoint.bin` in the run directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the audit checks; exits nonzero on any failure.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Audit the ε instances with half the sound sensitivity.
        #[arg(long)]
        broken_delta_u: bool,
    },
    /// Draw one SVG per results CSV.
    Report {
        /// Result CSVs.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Accepted for symmetry with the other commands; unused.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn load(c: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

fn main_inner(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Pretrain(c) => {
            let (cfg, out) = load(&c)?;
            let s = run::pretrain(&cfg, &out)?;
            println!("final train loss: {:.6}", s.train_loss);
            println!("zero-shot loss on fine-tune set: {:.6}", s.zero_shot_loss);
            println!("zero-shot test {:?}: {:.6}", s.metric, s.zero_shot_test_metric);
            println!("checkpoint: {}", run::default_checkpoint(&out).display());
            Ok(0)
        }
        Command::Finetune { common, checkpoint } => {
            let (cfg, out) = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| run::default_checkpoint(&out));
            let res = run::finetune(&cfg, &out, &ckpt)?;
            println!(
                "{} rows written to {}",
                res.rows.len(),
                out.join(run::RESULTS_FILE).display()
            );
            Ok(0)
        }
        Command::Audit { common, broken_delta_u } => {
            let (cfg, out) = load(&common)?;
            let o = audit_cmd::audit(&cfg, &out, broken_delta_u)?;
            for r in &o.reports {
                let tag = if r.is_failure() {
                    "FAIL"
                } else if r.vacuous {
                    "vacuous"
                } else if r.negative_control {
                    "control"
                } else {
                    "ok"
                };
                println!(
                    "{tag:<8} {:<40} stat={:.4e} bound={:.4e} slack={:.2e}",
                    r.check_name, r.statistic, r.bound, r.slack
                );
            }
            println!("{} reports, {} failures", o.reports.len(), o.failures);
            Ok(o.exit_code())
        }
        Command::Report { results, out, .. } => {
            let (svgs, table) = report::report(&results, &out)?;
            print!("{table}");
            for s in svgs {
                println!("wrote {}", s.display());
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
