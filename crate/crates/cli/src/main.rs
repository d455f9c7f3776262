use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nvdephase::spin_model::SpinSystemParams;
use nvdephase_cli::commands::{self, FitArgs, PlotArgs, SimulateArgs};
use nvdephase_cli::config::RunConfig;
use nvdephase_cli::validate::{render_table, run_checks};
use nvdephase_cli::CliError;

/// NV-center ¹³C dephasing simulator and fitter.
#[derive(Debug, Parser)]
#[command(name = "nvdephase", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate an FID or Hahn-echo trace and write CSV/JSON.
    Simulate(SimulateArgs),
    /// Fit a trace and print the dephasing parameters.
    Fit(FitArgs),
    /// Run the oracle check suite.
    Validate {
        /// Check these spin parameters instead of the defaults.
        #[arg(long)]
        config: Option<std::path::PathBuf>,
    },
    /// Render traces or fit reports as SVG.
    Plot(PlotArgs),
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.cmd {
        Cmd::Simulate(a) => {
            for p in commands::simulate(&a)? {
                println!("wrote {}", p.display());
            }
        }
        Cmd::Fit(a) => {
            let (report, path) = commands::fit(&a)?;
            print!("{}", report.summary_table());
            for w in commands::fit_warnings(&report) {
                eprintln!("warning: {w}");
            }
            println!("wrote {}", path.display());
        }
        Cmd::Validate { config } => {
            let params = match config {
                Some(p) => RunConfig::load(&p)?.spin,
                None => SpinSystemParams::default(),
            };
            let checks = run_checks(&params);
            print!("{}", render_table(&checks));
            if checks.iter().any(|c| !c.pass) {
                return Ok(1);
            }
        }
        Cmd::Plot(a) => {
            for p in commands::plot(&a)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
