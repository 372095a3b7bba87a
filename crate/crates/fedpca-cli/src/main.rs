//! Batch experiment runner: parses a TOML config, executes the
//! methods × seeds matrix, and writes CSV/JSON artifacts.
//!
//! Exit status is zero only when every cell of the matrix completed; cell
//! warnings and failures are reported on stderr either way.

use clap::Parser;
use fedpca::config::{parse_config, scenario_hash, ExperimentConfig};
use fedpca::data::build_scenario;
use fedpca::runner::{cell_scenario_config, run_matrix};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "fedpca",
    version,
    about = "Deterministic simulator of noise-robust fair federated learning"
)]
struct Cli {
    /// Experiment config file (TOML).
    config: PathBuf,

    /// Write artifacts here instead of the config's output_dir.
    #[arg(long)]
    output_dir: Option<PathBuf>,

    /// Run only this seed, replacing the config's seed list.
    #[arg(long)]
    seed: Option<u64>,

    /// Force serial cell execution.
    #[arg(long)]
    deterministic: bool,

    /// Describe the per-seed scenarios (sizes, ground truth, hash) and exit.
    #[arg(long)]
    list_scenarios: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        // A downstream consumer (e.g. `| head`) closing the pipe is a
        // normal early exit, not a failure.
        Err(fedpca::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> fedpca::Result<bool> {
    let mut config = parse_config(&cli.config)?;
    if let Some(dir) = cli.output_dir {
        config.output_dir = dir;
    }
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;

    if cli.list_scenarios {
        list_scenarios(&config)?;
        return Ok(true);
    }

    let index = run_matrix(&config, cli.deterministic)?;
    for cell in &index.cells {
        for warning in &cell.warnings {
            eprintln!("warning [{} seed {}]: {warning}", cell.method, cell.seed);
        }
        if let Some(error) = &cell.error {
            eprintln!("failed [{} seed {}]: {error}", cell.method, cell.seed);
        }
    }
    let ok = index.cells.iter().filter(|c| c.status == "ok").count();
    writeln!(
        std::io::stdout(),
        "{ok} of {} cells completed; artifacts in {}",
        index.cells.len(),
        config.output_dir.display()
    )?;
    Ok(ok == index.cells.len())
}

/// Prints one block per run seed: the derived scenario and its ground truth.
fn list_scenarios(config: &ExperimentConfig) -> fedpca::Result<()> {
    let mut out = std::io::stdout().lock();
    let s = &config.scenario;
    writeln!(out, "scenario hash: {}", scenario_hash(s)?)?;
    writeln!(
        out,
        "{} clients x {} samples, {} classes, input dim {}",
        s.num_clients, s.samples_per_client, s.num_classes, s.input_dim
    )?;
    writeln!(
        out,
        "rare fraction {}, corruption sigma {}, rho {}, eta {}",
        s.rare_client_fraction, s.corruption_sigma, s.rho, s.eta
    )?;
    for &seed in &config.seeds {
        let cell_config = cell_scenario_config(config, seed);
        let scenario = build_scenario(&cell_config)?;
        writeln!(out, "seed {seed} (scenario seed {}):", cell_config.seed)?;
        writeln!(out, "  rare clients: {:?}", scenario.rare_client_ids())?;
        writeln!(out, "  mislabeled clients: {:?}", scenario.mislabeled_client_ids())?;
        let sizes: Vec<usize> = scenario.clients.iter().map(|c| c.len()).collect();
        writeln!(out, "  client sizes: {sizes:?}")?;
    }
    Ok(())
}
