//! `export-plans`: the exact masks `pretrain` would use, without training.

use semmae::{Error, Result};

use crate::common::{load_dataset, patch_grid};
use crate::config::RunConfig;
use crate::formats::PlanWriter;
use crate::pretrain::{epoch_rng, load_segmentation, plan_for_image, schedule};

/// Requested epochs, defaulting to the first and last.
pub fn requested_epochs(cfg: &RunConfig) -> Result<Vec<usize>> {
    let epochs = if cfg.plan_epochs.is_empty() {
        let mut v = vec![0, cfg.epochs - 1];
        v.dedup();
        v
    } else {
        cfg.plan_epochs.clone()
    };
    if let Some(bad) = epochs.iter().find(|&&e| e >= cfg.epochs) {
        return Err(Error::Config(format!("plan epoch {bad} outside a {}-epoch run", cfg.epochs)));
    }
    Ok(epochs)
}

/// Writes `plans.csv` and returns the number of rows.
pub fn run(cfg: &RunConfig) -> Result<usize> {
    let data = load_dataset(cfg)?;
    let pg = patch_grid(cfg, &data)?;
    let segs = load_segmentation(cfg, &data, pg.grid)?;
    let sched = schedule(cfg)?;
    let epochs = requested_epochs(cfg)?;
    std::fs::create_dir_all(&cfg.out)?;
    let file = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("plans.csv"))?);
    let mut w = PlanWriter::new(file, segs[0].parts())?;
    let mut rows = 0;
    for &epoch in &epochs {
        let alpha = cfg.strategy.alpha(epoch, &sched)?;
        let erng = epoch_rng(cfg.seed, epoch);
        for (i, seg) in segs.iter().enumerate() {
            let (flip, plan) = plan_for_image(&erng, i, seg, cfg.mask_ratio, alpha, cfg.hflip)?;
            w.write(epoch, i, flip, &plan)?;
            rows += 1;
        }
    }
    w.finish()?;
    Ok(rows)
}
