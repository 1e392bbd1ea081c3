//! `pretrain`: masked-autoencoder training with a part-aware masking strategy.

use semmae::mae_core::{
    checkpoint, evaluate_mim, hflip, patchify, train_step, AdamW, LrSchedule, MaeModel, TrainItem, ENCODER_PREFIX,
};
use semmae::mask_scheduler::{compute_num_mask_at, sample_mask_indices, MaskPlan, ScheduleConfig, Strategy};
use semmae::numerics::{Rng, Tensor};
use semmae::params::ParamStore;
use semmae::partlearn::{Grid, PartSegmentation};
use semmae::{Error, Result};

use crate::common::{batches_per_epoch, csv_writer, load_dataset, load_patch_labels, mae_config, patch_grid, write_row};
use crate::config::{RunConfig, SegmentationSource};
use crate::dataset::Dataset;
use crate::formats::load_segmentations;

pub const METRICS_HEADER: [&str; 4] = ["epoch", "alpha", "mim_loss", "lr"];
pub const EVAL_HEADER: [&str; 3] = ["strategy", "eval_masks", "eval_mim_loss"];

/// Stream ids under the run seed.
const MODEL_STREAM: u64 = 0;
const EPOCH_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub alpha: f64,
    pub mim_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub rows: Vec<EpochRow>,
    /// Masked-pixel loss of the final model under shared uniform masks.
    pub eval_loss: f64,
}

/// Schedule used by `pretrain` and `export-plans`: the curriculum spans the
/// run's 0-based epochs, so the last epoch sits at the endpoint.
pub fn schedule(cfg: &RunConfig) -> Result<ScheduleConfig> {
    let mut s = ScheduleConfig::new(cfg.mask_ratio, cfg.gamma, cfg.epochs.saturating_sub(1).max(1))?;
    s.reverse = cfg.reverse_schedule;
    Ok(s)
}

/// Segmentations for every image, or a single all-covering part for the
/// random strategy.
pub fn load_segmentation(cfg: &RunConfig, data: &Dataset, grid: Grid) -> Result<Vec<PartSegmentation>> {
    if cfg.strategy == Strategy::Random {
        return Ok(vec![PartSegmentation::single_part(grid); data.len()]);
    }
    let segs = match &cfg.segmentation {
        SegmentationSource::None => {
            return Err(Error::Config(format!(
                "strategy {} needs a segmentation (set segmentation=PATH or segmentation=ground-truth)",
                cfg.strategy
            )))
        }
        SegmentationSource::GroundTruth => {
            let labels = load_patch_labels(cfg, data)?
                .ok_or_else(|| Error::Config("segmentation=ground-truth but the dataset has no label file".into()))?;
            let parts = labels.iter().flatten().copied().max().unwrap_or(0) + 1;
            labels
                .into_iter()
                .map(|l| PartSegmentation::from_labels(l, parts, grid))
                .collect::<Result<Vec<_>>>()?
        }
        SegmentationSource::File(path) => load_segmentations(path)?,
    };
    if segs.len() != data.len() || segs.iter().any(|s| s.grid != grid) {
        return Err(Error::Format(format!(
            "segmentation covers {} images on a {:?} grid, dataset has {} images on {:?}",
            segs.len(),
            segs.first().map(|s| s.grid),
            data.len(),
            grid
        )));
    }
    Ok(segs)
}

/// The mask for image `image` in one epoch. Each image draws from its own
/// stream of `epoch_rng`: substream 0 orders the parts, 1 samples patches and
/// 2 decides the horizontal flip (which also mirrors the segmentation).
pub fn plan_for_image(
    epoch_rng: &Rng,
    image: usize,
    seg: &PartSegmentation,
    mask_ratio: f64,
    alpha: f64,
    allow_flip: bool,
) -> Result<(bool, MaskPlan)> {
    let rng = epoch_rng.split(1 + image as u64);
    let flip = allow_flip && rng.split(2).bernoulli(0.5);
    let flipped;
    let seg = if flip {
        flipped = seg.hflip();
        &flipped
    } else {
        seg
    };
    let plan = compute_num_mask_at(seg, mask_ratio, alpha, &mut rng.split(0))?;
    Ok((flip, sample_mask_indices(seg, &plan, &mut rng.split(1))?))
}

pub fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    Rng::new(seed).split(EPOCH_STREAM).split(epoch as u64)
}

/// Uniform random masks shared by every strategy at a given seed.
fn evaluation_items(cfg: &RunConfig, patches: &[Tensor], l: usize) -> Vec<TrainItem> {
    let root = Rng::new(cfg.seed).split(EVAL_STREAM);
    let budget = semmae::mask_scheduler::mask_budget(l, cfg.mask_ratio);
    let mut items = Vec::with_capacity(cfg.eval_masks * patches.len());
    for draw in 0..cfg.eval_masks {
        let rng = root.split(draw as u64);
        for (i, p) in patches.iter().enumerate() {
            let mut masked = rng.split(i as u64).permutation(l);
            masked.truncate(budget);
            masked.sort_unstable();
            items.push(TrainItem {
                patches: p.clone(),
                masked,
            });
        }
    }
    items
}

pub fn run(cfg: &RunConfig) -> Result<PretrainSummary> {
    let data = load_dataset(cfg)?;
    let pg = patch_grid(cfg, &data)?;
    let segs = load_segmentation(cfg, &data, pg.grid)?;
    let sched = schedule(cfg)?;
    let root = Rng::new(cfg.seed);

    let mut store = ParamStore::new();
    let model = MaeModel::init(&mut store, mae_config(cfg, pg)?, &mut root.split(MODEL_STREAM))?;
    if let Some(path) = &cfg.init_checkpoint {
        let n = checkpoint::restore(&mut store, &checkpoint::load(path)?, ENCODER_PREFIX)?;
        log::info!("restored {n} encoder tensors from {}", path.display());
    }
    let patches = data.images.iter().map(|img| patchify(img, &pg)).collect::<Result<Vec<_>>>()?;
    let flipped = if cfg.hflip {
        data.images.iter().map(|img| patchify(&hflip(img), &pg)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    std::fs::create_dir_all(&cfg.out)?;
    let mut metrics = csv_writer(&cfg.out.join("metrics.csv"), &METRICS_HEADER)?;
    let bpe = batches_per_epoch(data.len(), cfg.batch_size);
    let lr_sched = LrSchedule::new(cfg.peak_lr, cfg.effective_warmup_epochs() * bpe, cfg.epochs * bpe)?;
    let mut opt = AdamW::new(&store, cfg.weight_decay);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let alpha = cfg.strategy.alpha(epoch, &sched)?;
        let erng = epoch_rng(cfg.seed, epoch);
        let order = erng.split(0).permutation(data.len());
        let lr = lr_sched.lr(step);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let (flip, plan) = plan_for_image(&erng, i, &segs[i], cfg.mask_ratio, alpha, cfg.hflip)?;
                    Ok(TrainItem {
                        patches: if flip { flipped[i].clone() } else { patches[i].clone() },
                        masked: plan.masked_indices.expect("sampled plan carries indices"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            total += train_step(&model, &mut store, &mut opt, &batch, lr_sched.lr(step))? * batch.len() as f64;
            step += 1;
        }
        let row = EpochRow {
            epoch,
            alpha,
            mim_loss: total / data.len() as f64,
            lr,
        };
        log::info!("pretrain epoch {epoch}: alpha {alpha:.4} mim_loss {:.5} lr {lr:.3e}", row.mim_loss);
        write_row(
            &mut metrics,
            &[epoch.to_string(), alpha.to_string(), row.mim_loss.to_string(), lr.to_string()],
        )?;
        rows.push(row);
    }
    checkpoint::save(&store, &cfg.out.join("pretrain.ckpt"))?;

    let eval_loss = if cfg.eval_masks > 0 {
        evaluate_mim(&model, &store, &evaluation_items(cfg, &patches, pg.num_patches()))?
    } else {
        f64::NAN
    };
    let mut eval = csv_writer(&cfg.out.join("eval.csv"), &EVAL_HEADER)?;
    write_row(
        &mut eval,
        &[cfg.strategy.name().to_string(), cfg.eval_masks.to_string(), eval_loss.to_string()],
    )?;
    Ok(PretrainSummary { rows, eval_loss })
}
