//! `stllm` — prepare data, train, evaluate and verify the STLLM-DF forecaster.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stllm_df::autodiff::OpKind;
use stllm_df::error::Result;
use stllm_df::harness::{self, RunConfig};

#[derive(Parser, Debug)]
#[command(version, about = "Spatio-temporal traffic forecasting with diffusion-based recovery")]
struct Cli {
    /// error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the run seed from the config
    #[arg(long)]
    seed: Option<u64>,

    /// Directory for artifacts, caches and run.log
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Window, split, normalize and cache the data source
    Prepare(Common),
    /// Train the noise predictor used for missing-value recovery
    TrainDenoiser(Common),
    /// Train the forecaster
    Train(Common),
    /// Evaluate the trained forecaster on the test split
    Eval(Common),
    /// Compare recovery on/off/mean-imputation over a missing-ratio grid
    SweepMissing(Common),
    /// Finite-difference check of every operation and module
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Scale the backward rule of one operation to prove the check catches it
        #[arg(long, value_name = "OP")]
        inject_fault: Option<OpKind>,
    },
    /// Train and evaluate all four denoise × transformer combinations
    Ablation(Common),
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(c) => {
            let o = harness::cmd_prepare(&config(&c)?, &c.out)?;
            println!(
                "{:?}: {} train / {} val / {} test samples",
                o.status, o.samples[0], o.samples[1], o.samples[2]
            );
        }
        Command::TrainDenoiser(c) => {
            let curve = harness::cmd_train_denoiser(&config(&c)?, &c.out)?;
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!("denoiser loss {first:.6} -> {last:.6} over {} steps", curve.len());
            }
        }
        Command::Train(c) => {
            let curve = harness::cmd_train(&config(&c)?, &c.out)?;
            let best = curve.iter().map(|e| e.val_mae).fold(f64::INFINITY, f64::min);
            println!("{} epochs, best validation MAE {best:.6}", curve.len());
        }
        Command::Eval(c) => {
            let o = harness::cmd_eval(&config(&c)?, &c.out)?;
            println!("{}", o.model.to_json());
            println!("HI baseline MAE {:.6}", o.baseline.mae);
        }
        Command::SweepMissing(c) => {
            println!("missing_ratio,recovery_on_mae,recovery_off_mae,mean_impute_mae");
            for r in harness::cmd_sweep_missing(&config(&c)?, &c.out)? {
                println!(
                    "{},{:.6},{:.6},{:.6}",
                    r.missing_ratio, r.recovery_on_mae, r.recovery_off_mae, r.mean_impute_mae
                );
            }
        }
        Command::Gradcheck { common, inject_fault } => {
            config(&common)?;
            let report = harness::cmd_gradcheck(&common.out, inject_fault);
            match &report {
                Ok(r) => print!("{}", r.render()),
                Err(_) => {
                    // The report file still holds the per-check table.
                    if let Ok(text) = std::fs::read_to_string(common.out.join("gradcheck.txt")) {
                        print!("{text}");
                    }
                }
            }
            report?;
        }
        Command::Ablation(c) => {
            println!("variant,mae,rmse,mape_pct,epochs");
            for r in harness::cmd_ablation(&config(&c)?, &c.out)? {
                let mape = r.mape_pct.map(|v| format!("{v:.4}")).unwrap_or_default();
                println!("{},{:.6},{:.6},{mape},{}", r.variant, r.mae, r.rmse, r.epochs);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Configured from flags only; the environment is never consulted.
    env_logger::Builder::new().filter_level(cli.log_level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
