use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hbf_core::harness::{load_config, ExperimentConfig, ExperimentId, FigureResult, HarnessError, Runner};

#[derive(Parser, Debug)]
#[command(name = "hbf", version, about = "Hybrid analog/digital precoding experiments")]
struct Cli {
    /// TOML experiment configuration; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Channels per SE point override.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and store the evaluation channels.
    GenChannels,
    /// Train (or load from cache) the precoder network for the configured system.
    Train,
    /// Spectral efficiency of every scheme over the configured SNR grid.
    Eval,
    /// Run one experiment: fig6, fig7, fig8, fig9, beampattern, fig12 or fig13.
    Fig { id: String },
    /// Run every experiment in order.
    All,
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(t) = cli.trials {
        cfg.trials = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(res: &FigureResult) {
    for p in &res.bundle.csv_paths {
        println!("wrote {p}");
    }
    println!("config_hash {}", res.bundle.config_hash);
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = build_config(cli)?;
    let mut runner = Runner::new(cfg)?;
    runner.verbose = !cli.quiet;
    match &cli.command {
        Command::GenChannels => {
            let p = runner.gen_channels()?;
            println!("wrote {}", p.display());
        }
        Command::Train => {
            let s = &runner.cfg.system;
            let tm = runner.trained_model(s.n_t, s.n_rf_t)?;
            let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
            println!(
                "model {} ({}): train loss {:.4}, val loss {:.4}, test accuracy {:.3}",
                tm.key,
                if tm.from_cache { "cached" } else { "trained" },
                last(&tm.history.train_loss),
                last(&tm.history.val_loss),
                last(&tm.history.test_accuracy),
            );
        }
        Command::Eval => report(&runner.run_eval()?),
        Command::Fig { id } => {
            let id =
                ExperimentId::parse(id).ok_or_else(|| HarnessError::Config(format!("unknown experiment id {id:?}")))?;
            report(&runner.run(id)?);
        }
        Command::All => report(&runner.run_all()?),
    }
    Ok(())
}

fn error_kind(e: &HarnessError) -> &'static str {
    match e {
        HarnessError::Config(_) => "config",
        HarnessError::Channel(_) => "channel",
        HarnessError::Precoder(_) => "precoder",
        HarnessError::Metrics(_) => "metrics",
        HarnessError::Neural(_) => "neural",
        HarnessError::Tensor(_) => "tensor_io",
        HarnessError::Io { .. } => "io",
        HarnessError::Csv(_) => "csv",
        HarnessError::Json(_) => "json",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error kind={} message={:?}", error_kind(&e), e.to_string());
            ExitCode::from(2)
        }
    }
}
