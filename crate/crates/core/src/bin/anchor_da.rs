use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use anchor_da::error::Error;
use anchor_da::pipeline::{
    self, fit_once, load_config, regenerate_report, run_pipeline, select_once, simulate_to_dir,
};

/// Robust fingerprint estimation and detection/attribution testing.
#[derive(Parser)]
#[command(name = "anchor-da", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the number of parallel workers.
    #[arg(long)]
    jobs: Option<usize>,
    /// Artifact directory; defaults to runs/run-<unix time>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured scenario as manifest-format data files.
    Simulate(CommonOpts),
    /// Check a configuration and print every violation.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fit one fingerprint at fixed hyperparameters on all data.
    Fit {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        gamma: f64,
        #[arg(long)]
        lambda: f64,
    },
    /// One train/test split: cross-validated grid sweep and selection.
    Select(CommonOpts),
    /// The full pipeline: subagging, selection, hypothesis tests, artifacts.
    Test(CommonOpts),
    /// Recompute reports and plot data for a persisted run directory.
    Report {
        /// Run directory containing config.json.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn resolve_out(out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| {
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        PathBuf::from("runs").join(format!("run-{stamp}"))
    })
}

fn load(common: &CommonOpts) -> Result<pipeline::PipelineConfig, Error> {
    let mut config = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run() -> Result<(), Error> {
    match Cli::parse().command {
        Command::Simulate(common) => {
            let config = load(&common)?;
            let out = resolve_out(common.out);
            let written = simulate_to_dir(&config, &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Validate { config } => {
            let config = load_config(&config)?;
            let findings = pipeline::validate_config(&config);
            if findings.is_empty() {
                println!("configuration is valid");
                Ok(())
            } else {
                for f in &findings {
                    println!("{}: {}", f.path, f.message);
                }
                Err(Error::Config(format!("{} finding(s)", findings.len())))
            }
        }
        Command::Fit { common, gamma, lambda } => {
            let config = load(&common)?;
            let out = resolve_out(common.out);
            fit_once(&config, gamma, lambda, &out)?;
            println!("wrote {}", out.join("fingerprint.json").display());
            Ok(())
        }
        Command::Select(common) => {
            let config = load(&common)?;
            let out = resolve_out(common.out);
            let selected = select_once(&config, &out)?;
            println!(
                "selected gamma = {}, lambda = {} (score {:.6})",
                selected.gamma, selected.lambda, selected.score
            );
            println!("wrote {}", out.join("objective_table.tsv").display());
            Ok(())
        }
        Command::Test(common) => {
            let config = load(&common)?;
            let out = resolve_out(common.out);
            let artifacts = run_pipeline(&config, &out, common.jobs)?;
            let r = &artifacts.report;
            match (r.alpha_bar, r.kappa_bar) {
                (Some(a), Some(k)) => println!("type I error {a:.4}, power {k:.4} over {} members", r.subag_members),
                (Some(a), None) => println!("type I error {a:.4} over {} members", r.subag_members),
                _ => println!("report written ({} members)", r.subag_members),
            }
            println!("artifacts in {}", artifacts.dir.display());
            Ok(())
        }
        Command::Report { dir, jobs } => {
            let artifacts = regenerate_report(&dir, jobs)?;
            println!("regenerated reports in {}", artifacts.dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
