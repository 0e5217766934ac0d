use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use softproj::cli::{self, ExperimentConfig};
use softproj::control::Method;
use softproj::error::{Error, Result};

#[derive(Parser)]
#[command(name = "softproj", version, about = "Soft behavioral projections for data-driven predictive control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON experiment configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Restrict the campaign to one method, or pick the online method.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Comma-separated SNR levels.
    #[arg(long, global = true, value_delimiter = ',')]
    snr: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep lambda_g / delta on validation realizations.
    Validate,
    /// Fresh test realizations at the chosen parameters.
    Test {
        /// Output of `validate`; validation is rerun when omitted.
        #[arg(long)]
        chosen: Option<PathBuf>,
    },
    /// Eigenvalues of the two soft maps over a delta sweep.
    Eigencurves,
    /// Adaptive vs frozen projector on a plant with a stiffness change.
    Online,
    /// Empirical projector gap against its error bound.
    Bound,
}

fn configure(c: &Common) -> Result<ExperimentConfig> {
    let mut exp = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        exp.seed = s;
    }
    if let Some(o) = &c.out {
        exp.out_dir = o.clone();
    }
    if c.jobs.is_some() {
        exp.jobs = c.jobs;
    }
    if let Some(m) = &c.method {
        let m = Method::parse(m)?;
        exp.methods = vec![m];
        exp.online.method = m;
    }
    if let Some(s) = &c.snr {
        exp.snr_list = s.clone();
    }
    exp.validate()?;
    Ok(exp)
}

fn run(cli: Cli) -> Result<()> {
    let exp = configure(&cli.common)?;
    match cli.command {
        Command::Validate => {
            let res = cli::cmd_validate(&exp)?;
            for c in &res.chosen {
                println!("snr {:>5} {:<16} param {:.4e} cost {:.4}", c.snr, c.method.name(), c.param, c.mean_cost);
            }
        }
        Command::Test { chosen } => {
            let chosen = chosen.map(cli::load_chosen).transpose()?;
            for s in cli::cmd_test(&exp, chosen)? {
                println!(
                    "snr {:>5} {:<16} cost {:.4} pred_err {:.4} var {:.4} failures {}",
                    s.snr,
                    s.method.name(),
                    s.mean_cost,
                    s.mean_pred_err,
                    s.pred_err_var,
                    s.failures
                );
            }
        }
        Command::Eigencurves => {
            let rows = cli::cmd_eigencurves(&exp)?;
            println!("{} rows", rows.len());
        }
        Command::Online => {
            let runs = cli::cmd_online(&exp)?;
            let wins = runs.iter().filter(|r| r.adaptive_wins()).count();
            println!("adaptive lower second-half cost in {wins}/{} runs", runs.len());
        }
        Command::Bound => {
            let sweep = cli::cmd_bound(&exp)?;
            match cli::interior_minimizer(&sweep) {
                Some(k) => println!("bound minimized at delta = {:.4e}", sweep[k].0.delta),
                None => println!("bound has no interior minimizer on this grid"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Parameter(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
