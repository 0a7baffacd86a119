use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hyperfl::attack::AttackConfig;
use hyperfl::cli::{emit_report, load_experiment, read_json, run_attack_files, run_experiment, run_partition};
use hyperfl::Result;

/// Federated learning simulator with client-side hypernetworks.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment file and write a run directory.
    Train { config: PathBuf },
    /// Attack single training images using the state in a snapshot.
    Attack { snapshot: PathBuf, config: PathBuf },
    /// Write only the client partition manifest.
    Partition { config: PathBuf },
    /// Summarize a run directory into report/.
    Report { run_dir: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_experiment(&config)?;
            let out = run_experiment(&cfg)?;
            println!(
                "{}: {} rounds, mean test accuracy {:.4} -> {}",
                cfg.algorithm.name(),
                out.final_accuracy.rounds,
                out.final_accuracy.mean_test_acc,
                cfg.output_dir.display()
            );
        }
        Command::Attack { snapshot, config } => {
            let cfg: AttackConfig = read_json(&config)?;
            cfg.validate()?;
            let report = run_attack_files(&snapshot, &cfg)?;
            let n = report.samples.len();
            if n > 0 {
                let mean = report.samples.iter().map(|s| s.psnr).sum::<f64>() / n as f64;
                println!("{n} samples, mean PSNR {mean:.2} dB");
            } else {
                println!("0 samples");
            }
        }
        Command::Partition { config } => {
            let cfg = load_experiment(&config)?;
            println!("{}", run_partition(&cfg)?.display());
        }
        Command::Report { run_dir } => {
            let (_, path) = emit_report(&run_dir)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage errors count as configuration errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
