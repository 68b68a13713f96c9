use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use phasepos::models::ModelKind;
use phasepos_cli::commands::{self, Selection, TrainOptions};
use phasepos_cli::config::RunConfig;
use phasepos_cli::{init_workers, CliError};

#[derive(Parser)]
#[command(name = "phasepos", version, about = "Phase-only positioning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; keys override the selected preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the reduced desk-scale preset.
    #[arg(long, global = true)]
    desk_scale: bool,
    #[arg(long, global = true, value_enum)]
    model: Option<ModelArg>,
    /// Carrier frequency in Hz, e.g. 800e6.
    #[arg(long, global = true)]
    freq: Option<f64>,
    /// Transmit power in dBm.
    #[arg(long, global = true, allow_negative_numbers = true)]
    power: Option<f64>,
    /// Output directory (overrides the config and the environment).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the AP layout of every selected frequency.
    Scenario,
    /// Simulate train/val/test datasets.
    Simulate,
    /// Train model bundles.
    Train,
    /// Evaluate bundles and MLE baselines on the test sets.
    Bench,
    /// Write the complexity table and CSV copies of the test sets.
    Export,
    /// Scenario, simulate, train and bench in one go.
    Run,
    /// Print the effective configuration.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mlp,
    Ae,
    Cnn,
    All,
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), cli.desk_scale)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    cfg.validate()?;
    init_workers(cfg.workers)?;
    let sel = Selection {
        frequency: cli.freq,
        power_dbm: cli.power,
        models: match cli.model {
            None | Some(ModelArg::All) => Vec::new(),
            Some(ModelArg::Mlp) => vec![ModelKind::Mlp],
            Some(ModelArg::Ae) => vec![ModelKind::Ae],
            Some(ModelArg::Cnn) => vec![ModelKind::Cnn],
        },
    };
    match cli.command {
        Command::Scenario => commands::cmd_scenario(&cfg, &sel).map(drop),
        Command::Simulate => commands::cmd_simulate(&cfg, &sel),
        Command::Train => commands::cmd_train(&cfg, &sel, TrainOptions::default()),
        Command::Bench => commands::cmd_bench(&cfg, &sel).map(drop),
        Command::Export => commands::cmd_export(&cfg, &sel),
        Command::Run => commands::cmd_run(&cfg, &sel).map(drop),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
