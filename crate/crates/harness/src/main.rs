use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use probreg_harness::commands::{self, write_file};
use probreg_harness::{exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "probreg", version, about = "Synthetic tracking experiments with probabilistic regression")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config (default `probreg-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Average AUC, OP50 and OP75 of each loss model.
    CompareLosses,
    /// AUC as a function of sigma_tc or sigma_bb.
    SigmaSweep,
    /// Per-sequence tracking traces.
    Track,
    /// Center density and box-score slices for selected frames.
    DumpDensity {
        /// Frame index; repeatable. Defaults to the config's `[dump] frames`.
        #[arg(long = "frame")]
        frames: Vec<usize>,
    },
    /// Quick consistency checks.
    Selftest,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    cfg.check()?;
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("probreg-out"));
    let jobs = cli.common.jobs;
    match cli.command {
        Command::CompareLosses => {
            let rows = commands::compare_losses(&cfg, jobs)?;
            let csv = commands::compare_losses_csv(&rows);
            let path = write_file(&out, "compare_losses.csv", &csv)?;
            print!("{csv}");
            eprintln!("wrote {}", path.display());
        }
        Command::SigmaSweep => {
            let points = commands::sigma_sweep(&cfg, jobs)?;
            let csv = commands::sigma_sweep_csv(&points);
            let path = write_file(&out, "sigma_sweep.csv", &csv)?;
            print!("{csv}");
            eprintln!("wrote {}", path.display());
        }
        Command::Track => {
            let runs = commands::track(&cfg, jobs)?;
            let dir = out.join("traces");
            for c in &runs {
                write_file(&dir, &commands::trace_file_name(c), &c.run.trace_csv())?;
            }
            let csv = commands::track_summary_csv(&runs);
            let path = write_file(&out, "track_summary.csv", &csv)?;
            print!("{csv}");
            eprintln!("wrote {} traces and {}", runs.len(), path.display());
        }
        Command::DumpDensity { frames } => {
            let frames = if frames.is_empty() { cfg.dump.frames.clone() } else { frames };
            let dumps = commands::dump_density(&cfg, &frames)?;
            let dir = out.join("density");
            commands::write_dumps(&dir, &dumps)?;
            eprintln!("wrote {} frames to {}", dumps.len(), dir.display());
        }
        Command::Selftest => {
            let checks = commands::selftest(cfg.seed)?;
            let mut failed = 0;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                anyhow::bail!("{failed} self-test check(s) failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
