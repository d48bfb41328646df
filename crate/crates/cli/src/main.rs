use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use matern_cli::commands;
use matern_cli::config::{DetRatioName, ExperimentConfig, Kind};
use matern_cli::CliError;

#[derive(Parser)]
#[command(name = "matern", version, about = "Hierarchical non-stationary Matérn inversions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise truth and noisy measurements.
    MakeData(Common),
    /// Run the MCMC chain and write conditional-mean estimates.
    Invert {
        #[command(flatten)]
        common: Common,
        /// Directory holding measurements.csv; synthesised when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated unknown-grid sizes, e.g. "81,161,321".
        #[arg(long, value_parser = parse_list)]
        refine: Option<List>,
    },
    /// Draw length-scale fields and prior realisations.
    Realize(Common),
    /// Sweep constant length-scales and score against the truth.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the full default configuration.
    Defaults {
        #[arg(long, default_value = "interp1d")]
        kind: Kind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DetRatioArg {
    Exact,
    Windowed,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides mcmc.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    det_ratio: Option<DetRatioArg>,
    #[arg(long, value_parser = parse_list)]
    trace_nodes: Option<List>,
    #[arg(long, value_parser = parse_list)]
    kde_nodes: Option<List>,
    #[arg(long)]
    emit_gnuplot: bool,
}

/// Comma-separated node indices or grid sizes.
#[derive(Clone, Debug)]
struct List(Vec<usize>);

fn parse_list(s: &str) -> Result<List, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(List)
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::from_toml_str("")?,
        };
        if let Some(seed) = self.seed {
            cfg.mcmc.seed = seed;
        }
        if let Some(d) = self.det_ratio {
            cfg.mcmc.det_ratio = match d {
                DetRatioArg::Exact => DetRatioName::Exact,
                DetRatioArg::Windowed => DetRatioName::Windowed,
            };
        }
        if let Some(nodes) = &self.trace_nodes {
            cfg.mcmc.trace_nodes = nodes.0.clone();
        }
        if let Some(nodes) = &self.kde_nodes {
            cfg.mcmc.kde_nodes = nodes.0.clone();
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        cfg.output.emit_gnuplot |= self.emit_gnuplot;
        cfg.check()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let manifest = match cli.command {
        Command::Defaults { kind } => {
            print!("{}", commands::defaults(kind));
            return Ok(());
        }
        Command::MakeData(c) => commands::make_data(&c.load()?)?,
        Command::Invert { common, data, refine } => commands::invert(&common.load()?, data.as_deref(), refine.as_ref().map(|l| l.0.as_slice()))?,
        Command::Realize(c) => commands::realize(&c.load()?)?,
        Command::Baseline { common, data } => commands::baseline(&common.load()?, data.as_deref())?,
    };
    eprintln!(
        "{}: wrote {} files to {} in {:.1}s",
        manifest.command,
        manifest.files.len() + 1,
        manifest.config.output.dir.display(),
        manifest.runtime_seconds
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
