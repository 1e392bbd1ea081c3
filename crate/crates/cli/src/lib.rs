//! Command-line driver: synthetic datasets, part learning, masked
//! pretraining, mask-plan export and reports.

pub mod common;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod formats;
pub mod part_learning;
pub mod plans;
pub mod pretrain;
pub mod report;

use semmae::{Error, Result};

pub use config::{parse_args, Command, Invocation, RunConfig};

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Shape(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::NumericAbort { .. } => 4,
    }
}

pub fn gen_dataset(cfg: &RunConfig) -> Result<()> {
    let path = cfg
        .dataset
        .clone()
        .unwrap_or_else(|| cfg.out.join(format!("{}.sten", cfg.kind.name())));
    let (images, labels) =
        dataset::generate(cfg.kind, cfg.count, cfg.image_height, cfg.image_width, cfg.k_parts, cfg.seed);
    images.save(&path)?;
    labels.save(&dataset::labels_path(&path))?;
    log::info!("wrote {} images to {}", images.len(), path.display());
    Ok(())
}

/// Runs a parsed invocation, writing `config.resolved` first.
pub fn execute(inv: &Invocation) -> Result<()> {
    let cfg = &inv.config;
    if inv.command != Command::Report {
        cfg.write_resolved(inv.command)?;
    }
    match inv.command {
        Command::GenDataset => gen_dataset(cfg),
        Command::Partlearn => part_learning::run(cfg).map(drop),
        Command::Pretrain => pretrain::run(cfg).map(drop),
        Command::ExportPlans => plans::run(cfg).map(drop),
        Command::Report => {
            print!("{}", report::summarize(&cfg.out)?);
            Ok(())
        }
    }
}

pub fn run_args<S: AsRef<str>>(args: &[S]) -> Result<()> {
    execute(&parse_args(args)?)
}
