//! `cim <subcommand> [--config <path>] [--key value ...]`
//!
//! Every config key doubles as a flag; flags are applied after the file.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use cim_core::app::{self, AppConfig};

#[derive(Parser, Debug)]
#[command(name = "cim", about = "Crop-and-correlate self-supervised pre-training", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the encoder and decoder; writes checkpoint and metrics.
    Pretrain(Args),
    /// Linear probe of the checkpoint against a random-init encoder.
    Probe(Args),
    /// Write context / ground-truth / prediction triptychs.
    Visualize(Args),
    /// Export the configured synthetic dataset as PPM files.
    GenData(Args),
    /// Finite-difference check of every op and the full pipeline.
    Gradcheck,
    /// Print every config key with its default value.
    Defaults,
}

#[derive(clap::Args, Debug)]
struct Args {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides as `--key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

/// Pair up `--key value` / `--key=value` tokens.
fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = tokens.iter();
    while let Some(tok) = it.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            bail!("expected a --key flag, found `{tok}`");
        };
        match flag.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().with_context(|| format!("flag --{flag} needs a value"))?;
                out.push((flag.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn load_config(args: &Args) -> Result<AppConfig> {
    let mut cfg = match &args.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };
    for (k, v) in parse_overrides(&args.overrides)? {
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => {
            let r = app::cmd_pretrain(&load_config(&a)?)?;
            println!("steps\t{}", r.steps);
            if let Some(l) = r.final_loss {
                println!("final_loss\t{l}");
            }
            if let Some(iou) = r.holdout_iou {
                println!("holdout_iou\t{iou}");
            }
            println!("checkpoint\t{}", r.checkpoint.display());
            println!("metrics\t{}", r.metrics.display());
        }
        Command::Probe(a) => {
            let r = app::cmd_probe(&load_config(&a)?)?;
            println!("classes\t{}\ttrain\t{}\ttest\t{}", r.classes, r.train_count, r.test_count);
            println!("pretrained\t{:.4}", r.pretrained);
            println!("random_init\t{:.4}", r.random_init);
        }
        Command::Visualize(a) => {
            for p in app::cmd_visualize(&load_config(&a)?)? {
                println!("{}", p.display());
            }
        }
        Command::GenData(a) => {
            let cfg = load_config(&a)?;
            let ds = app::cmd_gen_data(&cfg)?;
            println!("wrote {} images to {}", ds.len(), cfg.dataset.export_dir.display());
        }
        Command::Gradcheck => {
            let results = app::cmd_gradcheck();
            let mut failed = 0;
            for r in &results {
                let tag = if r.passed { "ok" } else { "FAIL" };
                println!("{tag}\t{}\tseeds {}\tmax_rel_err {:.3e}\ttol {:.0e}", r.name, r.seeds, r.max_rel_err, r.tol);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} gradient checks failed", results.len());
            }
        }
        Command::Defaults => print!("{}", AppConfig::documented_defaults()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
