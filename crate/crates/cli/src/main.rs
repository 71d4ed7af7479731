use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info};

use fedconn::harness::experiment::{
    cmd_interpret, cmd_preprocess, cmd_report, cmd_run, cmd_sweep_noise, cmd_sweep_pace, cmd_synth, resolve_out_dir,
    synth_for_seed, CellOutput,
};
use fedconn::harness::ExperimentConfig;

/// Federated connectivity-classification simulator.
#[derive(Parser)]
#[command(name = "fedconn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run a single seed instead of the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides FEDCONN_OUT and the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment TOML file.
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Featurize ROI CSV files into connectivity windows.
    Preprocess {
        #[arg(long)]
        roi_dir: PathBuf,
        #[arg(long)]
        phenotype: PathBuf,
        #[arg(long, default_value_t = 32)]
        window: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Export a synthetic dataset (the `data.synth` section of the config,
    /// or defaults) as ROI/phenotype CSV files.
    Synth {
        config: Option<PathBuf>,
    },
    /// Compare the configured strategies.
    Run(ConfigArg),
    /// Federated accuracy across the `tau_grid`.
    SweepPace(ConfigArg),
    /// Federated accuracy across the `noise_grid`.
    SweepNoise(ConfigArg),
    /// Biomarker reports for the `interpret` strategies.
    Interpret(ConfigArg),
    /// Summaries and Welch tests from a results CSV.
    Report {
        results: PathBuf,
    },
}

fn load(cli: &Cli, path: &PathBuf) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.out_dir = resolve_out_dir(cli.out.clone(), std::env::var("FEDCONN_OUT").ok(), &cfg.out_dir);
    Ok(cfg)
}

fn out_dir(cli: &Cli, fallback: &str) -> PathBuf {
    resolve_out_dir(cli.out.clone(), std::env::var("FEDCONN_OUT").ok(), &PathBuf::from(fallback))
}

fn report_cells(what: &str, out: &CellOutput, cfg: &ExperimentConfig) {
    info!("{what}: {} result records written to {}", out.records.len(), cfg.out_dir.display());
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Preprocess {
            roi_dir,
            phenotype,
            window,
            stride,
        } => {
            let out = out_dir(cli, "features");
            let ds = cmd_preprocess(roi_dir, phenotype, *window, *stride, &out)?;
            info!("{} subjects, {} features per window -> {}", ds.subjects.len(), ds.feature_dim(), out.display());
        }
        Command::Synth { config } => {
            let mut synth = match config {
                Some(p) => load(cli, p)?.data.synth,
                None => Default::default(),
            };
            if let Some(seed) = cli.seed {
                synth = synth_for_seed(&synth, seed);
            }
            let out = out_dir(cli, "synthetic");
            cmd_synth(&synth, &out)?;
            info!("synthetic dataset written to {}", out.display());
        }
        Command::Run(c) => {
            let cfg = load(cli, &c.config)?;
            report_cells("run", &cmd_run(&cfg)?, &cfg);
        }
        Command::SweepPace(c) => {
            let cfg = load(cli, &c.config)?;
            report_cells("sweep-pace", &cmd_sweep_pace(&cfg)?, &cfg);
        }
        Command::SweepNoise(c) => {
            let cfg = load(cli, &c.config)?;
            report_cells("sweep-noise", &cmd_sweep_noise(&cfg)?, &cfg);
        }
        Command::Interpret(c) => {
            let cfg = load(cli, &c.config)?;
            let reports = cmd_interpret(&cfg)?;
            for (kind, seed, r) in &reports {
                info!("{kind} seed {seed}: consistency {:.3}, pooled top-{} {:?}", r.mean_consistency(), r.k, r.pooled_top_k());
            }
        }
        Command::Report { results } => {
            let out = out_dir(cli, results.parent().and_then(|p| p.to_str()).unwrap_or("."));
            let (summary, comparisons) = cmd_report(results, &out)?;
            for s in summary.iter().filter(|s| s.site == "ALL") {
                println!(
                    "{:<12} tau={:<3} {}:{:<6} mean {:.4} ± {:.4} ({} seeds)",
                    s.strategy, s.tau, s.mechanism, s.alpha, s.mean_accuracy, s.std_accuracy, s.n_seeds
                );
            }
            for c in comparisons.iter().filter(|c| c.site == "ALL") {
                println!("{} vs {}: t = {:.3}, p = {:.4}", c.condition_a, c.condition_b, c.t, c.p);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("could not configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
