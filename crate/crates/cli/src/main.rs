//! `mim-sim`: command-line front-end for the membrane-in-the-middle toolkit.

mod commands;
mod config;
mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use commands::Context;
use error::CliError;
use output::{InputDigest, Manifest, Output};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    OpticsScan,
    Fit,
    BandDiagram,
    CoolingMap,
    QndDist,
    QndTrace,
    InfoCurve,
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::OpticsScan => "optics-scan",
            Command::Fit => "fit",
            Command::BandDiagram => "band-diagram",
            Command::CoolingMap => "cooling-map",
            Command::QndDist => "qnd-dist",
            Command::QndTrace => "qnd-trace",
            Command::InfoCurve => "info-curve",
            Command::Verify => "verify",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mim-sim", version, about = "Membrane-in-the-middle cavity simulations")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML parameter file; optional when a preset is given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in parameter set, overridden key by key by --config.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Scan CSV to fit (fit only).
    #[arg(long)]
    data: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MIM_SIM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("MIM_SIM_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn read_input(path: &Path) -> Result<(Vec<u8>, InputDigest), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let digest = InputDigest { path: path.display().to_string(), sha256: output::sha256_hex(&bytes) };
    Ok((bytes, digest))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    let started = output::unix_now();
    let name = cli.command.name();
    if cli.command == Command::Verify {
        return output::verify(&cli.out);
    }
    if cli.data.is_some() && cli.command != Command::Fit {
        return Err(CliError::Config("--data is only accepted by `fit`".into()));
    }

    let base = match &cli.preset {
        None => None,
        Some(p) => Some(config::preset(name, p).ok_or_else(|| {
            CliError::Config(format!(
                "unknown preset `{p}` for {name}; available: {}",
                config::preset_names(name).join(", ")
            ))
        })?),
    };
    let mut inputs = Vec::new();
    let overlay = match &cli.config {
        None => None,
        Some(path) => {
            let (bytes, digest) = read_input(path)?;
            inputs.push(digest);
            let text = String::from_utf8(bytes)
                .map_err(|_| CliError::Config(format!("{}: not valid UTF-8", path.display())))?;
            Some(text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?)
        }
    };
    if base.is_none() && overlay.is_none() {
        return Err(CliError::Config("either --config or --preset is required".into()));
    }
    if let Some(path) = &cli.data {
        inputs.push(read_input(path)?.1);
    }

    let params = config::Params::new(name, config::merge(base, overlay))?;
    let mut ctx = Context { params, out: Output::new(&cli.out), seed: cli.seed, data: cli.data.as_deref() };
    match cli.command {
        Command::OpticsScan => commands::optics_scan(&mut ctx)?,
        Command::Fit => commands::fit(&mut ctx)?,
        Command::BandDiagram => commands::band_diagram(&mut ctx)?,
        Command::CoolingMap => commands::cooling_map_cmd(&mut ctx)?,
        Command::QndDist => commands::qnd_dist(&mut ctx)?,
        Command::QndTrace => commands::qnd_trace(&mut ctx)?,
        Command::InfoCurve => commands::info_curve(&mut ctx)?,
        Command::Verify => unreachable!(),
    }
    let Context { params, out, .. } = ctx;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: name.into(),
        preset: cli.preset.clone(),
        seed: cli.seed,
        config: serde_json::to_value(params.resolved())?,
        inputs,
        started_unix_s: started,
        finished_unix_s: started,
        artifacts: Vec::new(),
    };
    let path = out.commit(manifest)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mim-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
