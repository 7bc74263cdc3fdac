use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leosplit::config::{ExperimentConfig, Mode};
use leosplit::data::scenario_from_config;
use leosplit::metrics::MetricsWriter;
use leosplit::protocol::Simulation;
use leosplit::Error;

/// Semi-supervised split learning over a simulated LEO constellation.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write per-round metrics as CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// leo-split, fixed-threshold, no-am, no-aai, no-pa-class or no-pa-quantity.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Metrics CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Summary {
    rounds: usize,
    final_acc: Option<f64>,
    sim_time_s: f64,
    bytes_down: u64,
    bytes_up: u64,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let acc = self
            .final_acc
            .map_or("n/a".to_string(), |a| format!("{a:.4}"));
        write!(
            f,
            "rounds={} final_acc={acc} sim_time_s={:.1} bytes_down={} bytes_up={}",
            self.rounds, self.sim_time_s, self.bytes_down, self.bytes_up
        )
    }
}

fn run_to<W: Write>(cfg: &ExperimentConfig, sink: W) -> leosplit::Result<Summary> {
    let (parts, test) = scenario_from_config(cfg)?;
    let mut sim = Simulation::new(cfg, parts, test)?;
    let mut metrics = MetricsWriter::new(sink, cfg.classes())?;
    let mut summary = Summary {
        rounds: cfg.rounds,
        final_acc: None,
        sim_time_s: 0.0,
        bytes_down: 0,
        bytes_up: 0,
    };
    for _ in 0..cfg.rounds {
        let report = sim.step_round()?;
        log::info!(
            "round {} acc {:.4} sent {} records",
            report.round,
            report.test_acc,
            report.records_sent()
        );
        metrics.write_round(&report)?;
        summary.final_acc = Some(report.test_acc);
        summary.sim_time_s = report.sim_time_s;
        summary.bytes_down += report.bytes_down();
        summary.bytes_up += report.bytes_up();
    }
    metrics.flush()?;
    Ok(summary)
}

fn run(
    config: PathBuf,
    seed: Option<u64>,
    mode: Option<String>,
    rounds: Option<usize>,
    out: Option<PathBuf>,
) -> leosplit::Result<()> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(r) = rounds {
        cfg.rounds = r;
    }
    cfg.validate()?;
    log::info!(
        "running {} for {} rounds, seed {}",
        cfg.mode,
        cfg.rounds,
        cfg.seed
    );
    match out {
        Some(path) => {
            let file = std::fs::File::create(&path)
                .map_err(|e| Error::Config(format!("cannot create {}: {e}", path.display())))?;
            let summary = run_to(&cfg, file)?;
            println!("{summary}");
        }
        None => {
            let summary = run_to(&cfg, std::io::stdout().lock())?;
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LEOSPLIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let Command::Run {
        config,
        seed,
        mode,
        rounds,
        out,
    } = cli.command;
    match run(config, seed, mode, rounds, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
