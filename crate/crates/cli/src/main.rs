use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mima_cli::results::load_results;
use mima_cli::{presets, CliError, ExperimentConfig, Summary};
use mima_core::gradcheck::{check_denoiser, check_immunize, check_merge, CheckReport};

#[derive(Parser)]
#[command(name = "mima", version, about = "Multi-concept immunization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradModule {
    All,
    Merge,
    Diffusion,
    Immunize,
}

#[derive(Subcommand)]
enum Command {
    /// Run the grid described by a config file.
    Run {
        config: PathBuf,
        /// Directory a relative `output_dir` is resolved against.
        #[arg(long, env = "MIMA_OUTPUT_ROOT")]
        output_root: Option<PathBuf>,
    },
    /// Finite-difference checks of the analytic gradients.
    CheckGradients {
        #[arg(long, value_enum, default_value = "all")]
        module: GradModule,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print MSGR / MRSGR tables for a results file.
    Summarize {
        results: PathBuf,
        /// Emit JSON instead of markdown.
        #[arg(long)]
        json: bool,
    },
    /// Print a bundled config.
    GenConfig {
        #[arg(long, value_parser = presets::PRESETS)]
        preset: String,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn gradient_reports(module: GradModule, seed: u64) -> Result<Vec<CheckReport>, CliError> {
    let mut out = Vec::new();
    if matches!(module, GradModule::All | GradModule::Merge) {
        out.push(check_merge(seed, 50)?);
    }
    if matches!(module, GradModule::All | GradModule::Diffusion) {
        out.push(check_denoiser(seed, 5)?);
    }
    if matches!(module, GradModule::All | GradModule::Immunize) {
        out.push(check_immunize(seed)?);
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Run { config, output_root } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = mima_cli::run_experiment(&cfg, output_root.as_deref())?;
            eprintln!(
                "{} cells, {} failed, {} rows -> {}",
                report.cells,
                report.failed,
                report.rows,
                report.output_dir.display()
            );
            Ok(report.exit_code())
        }
        Command::CheckGradients { module, seed } => {
            let mut ok = true;
            for r in gradient_reports(module, seed)? {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:28} cases={:3} max_rel_err={:.3e} tol={:.0e}",
                    r.name, r.cases, r.max_rel_err, r.tolerance
                );
                ok &= r.passed();
            }
            Ok(if ok { 0 } else { 3 })
        }
        Command::Summarize { results, json } => {
            let summary = Summary::from_rows(&load_results(&results)?);
            if json {
                let text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Internal(e.to_string()))?;
                println!("{text}");
            } else {
                print!("{}", summary.to_markdown());
            }
            Ok(0)
        }
        Command::GenConfig { preset, out } => {
            let cfg = presets::preset(&preset).ok_or_else(|| CliError::config("preset", format!("unknown `{preset}`")))?;
            let text = cfg.to_toml()?;
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?,
                None => print!("{text}"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
