use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vaepca::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser)]
#[command(
    name = "vaepca",
    about = "Autoencoder variants with decoder-orthogonality analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigOpts {
    /// Experiment config (TOML). Alternatively use --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config: synth-lin or synth-nonlin.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',', global = true)]
    seed_list: Option<Vec<u64>>,
    /// Parallel seed workers.
    #[arg(long, default_value_t = default_jobs(), global = true)]
    jobs: usize,
    /// Output directory for datasets, runs and reports.
    #[arg(long, default_value = "out", global = true)]
    out: PathBuf,
    /// Allow clobbering existing dataset files.
    #[arg(long, default_value_t = false, global = true)]
    overwrite: bool,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset named by the config.
    Generate(ConfigOpts),
    /// Train all seeds of the config and write run artifacts.
    Train(ConfigOpts),
    /// Recompute metrics for already-trained runs.
    Metrics(ConfigOpts),
    /// Train the config once per beta and tabulate score vs beta.
    SweepBeta {
        #[command(flatten)]
        opts: ConfigOpts,
        /// Comma-separated beta values.
        #[arg(long, value_delimiter = ',', required = true)]
        betas: Vec<f64>,
    },
    /// Run the worked-example and optimization-property suite.
    TheoryCheck {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the aggregate table over all runs in the output directory.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Write a built-in preset config as TOML to stdout.
    ShowConfig {
        /// synth-lin or synth-nonlin
        preset: String,
    },
}

fn load_config(opts: &ConfigOpts) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match (&opts.config, &opts.preset) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => experiment::preset(name).ok_or_else(|| {
            ExperimentError::Config(format!("unknown preset '{name}' (synth-lin, synth-nonlin)"))
        })?,
        (Some(_), Some(_)) => {
            return Err(ExperimentError::Config("pass either --config or --preset, not both".into()))
        }
        (None, None) => {
            return Err(ExperimentError::Config("a --config file or --preset is required".into()))
        }
    };
    if let Some(seeds) = &opts.seed_list {
        if seeds.is_empty() {
            return Err(ExperimentError::Config("--seed-list must not be empty".into()));
        }
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code_for(err: &ExperimentError) -> ExitCode {
    match err {
        ExperimentError::Config(_) | ExperimentError::Toml(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run() -> Result<(), ExperimentError> {
    match Cli::parse().command {
        Command::Generate(opts) => {
            let cfg = load_config(&opts)?;
            let stem = experiment::cmd_generate(&cfg, &opts.out, opts.overwrite)?;
            println!("dataset written to {}.{{csv,json}}", stem.display());
        }
        Command::Train(opts) => {
            let cfg = load_config(&opts)?;
            let runs = experiment::cmd_train(&cfg, &opts.out, opts.jobs)?;
            for r in &runs {
                let status = match &r.diverged {
                    Some(msg) => format!("DIVERGED ({msg})"),
                    None => "ok".into(),
                };
                println!("seed {:>3}: {status}", r.seed);
            }
            let summary = experiment::summarize(&cfg, &runs);
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Metrics(opts) => {
            let cfg = load_config(&opts)?;
            let runs = experiment::cmd_metrics(&cfg, &opts.out)?;
            let summary = experiment::summarize(&cfg, &runs);
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::SweepBeta { opts, betas } => {
            let cfg = load_config(&opts)?;
            let rows = experiment::cmd_sweep_beta(&cfg, &betas, &opts.out, opts.jobs)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::TheoryCheck { out } => {
            let lines = experiment::cmd_theory_check(&out)?;
            for l in &lines {
                println!(
                    "[{}] {} (residual {:.3e}) {}",
                    if l.passed { "PASS" } else { "FAIL" },
                    l.name,
                    l.residual,
                    l.detail
                );
            }
        }
        Command::Report { out } => {
            print!("{}", experiment::cmd_report(&out)?);
        }
        Command::ShowConfig { preset } => {
            let cfg = experiment::preset(&preset).ok_or_else(|| {
                ExperimentError::Config(format!("unknown preset '{preset}'"))
            })?;
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
