//! `partlearn`: learn part attention maps by reconstructing each image from
//! its blurred maps and class token.

use semmae::mae_core::{
    apply_gradients, batch_gradients, checkpoint, patchify, train_step, AdamW, LrSchedule, MaeModel, PatchGrid,
    TrainItem, DECODER_PREFIX, ENCODER_PREFIX,
};
use semmae::mask_scheduler::mask_budget;
use semmae::numerics::{Rng, Tape, Tensor, Var};
use semmae::params::{Bound, ParamStore};
use semmae::partlearn::{
    blur_maps, diversity_loss, segment_maps, select_foreground, AttentionMaps, EncoderTokens, PartAttentionParams,
    PartSegmentation,
};
use semmae::recon_decoder::{decode, part_learning_loss, recon_loss, DecoderParams};
use semmae::{Error, Result};

use crate::common::{
    batches_per_epoch, csv_writer, load_dataset, load_patch_labels, mae_config, patch_grid, write_row,
};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::eval::foreground_iou;
use crate::formats::save_segmentations;

pub const METRICS_HEADER: [&str; 5] = ["epoch", "recon_loss", "div_loss", "total_loss", "fg_iou"];
pub const ATTENTION_PREFIX: &str = "attn.";
pub const RECON_PREFIX: &str = "recon.";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub recon_loss: f64,
    pub div_loss: f64,
    pub total_loss: f64,
    pub fg_iou: Option<f64>,
}

struct Item {
    image: Tensor,
    patches: Tensor,
    /// Cached encoder output when the encoder is frozen.
    frozen: Option<(Tensor, Tensor)>,
}

struct Modules<'a> {
    cfg: &'a RunConfig,
    model: MaeModel,
    attention: PartAttentionParams,
    decoder: DecoderParams,
}

impl Modules<'_> {
    fn tokens(&self, tape: &mut Tape, bound: &Bound, item: &Item) -> Result<EncoderTokens> {
        match &item.frozen {
            Some((fc, f)) => {
                let (fc, f) = (tape.leaf(fc), tape.leaf(f));
                EncoderTokens::new(tape, fc, f, self.model.cfg.patch.grid)
            }
            None => {
                let x = tape.leaf(&item.patches);
                let enc = self.model.encode(tape, bound, x, &[])?;
                self.model.encoder_tokens(tape, &enc)
            }
        }
    }

    fn maps(&self, tape: &mut Tape, bound: &Bound, tokens: &EncoderTokens) -> Result<AttentionMaps> {
        let fp = self.attention.part_tokens(tape, bound, tokens)?;
        self.attention.attention_maps(tape, bound, fp, tokens)
    }

    /// Total loss plus `[recon, diversity]`, and the reconstruction.
    fn objective(&self, tape: &mut Tape, bound: &Bound, item: &Item) -> Result<(Var, Vec<Var>, Var)> {
        let tokens = self.tokens(tape, bound, item)?;
        let maps = self.maps(tape, bound, &tokens)?;
        let maps = blur_maps(tape, &maps, self.cfg.blur_kernel)?;
        let div = diversity_loss(tape, &maps)?;
        let recon = decode(tape, bound, &self.decoder, &maps, tokens.class_token, self.cfg.patch_size)?;
        let image = tape.leaf(&item.image);
        let rec = recon_loss(tape, image, recon)?;
        let total = part_learning_loss(tape, rec, div, self.cfg.lambda)?;
        Ok((total, vec![rec, div], recon))
    }

    fn raw_maps(&self, store: &ParamStore, item: &Item) -> Result<(Vec<f64>, PartSegmentation)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tokens = self.tokens(&mut tape, &bound, item)?;
        let maps = self.maps(&mut tape, &bound, &tokens)?;
        Ok((tape.value(maps.maps).to_vec(), segment_maps(&tape, &maps)?))
    }
}

/// Masked-pixel pretraining of the encoder with uniform random masks, so
/// its tokens carry image content before the attention module reads them.
fn warm_encoder(cfg: &RunConfig, model: &MaeModel, store: &mut ParamStore, items: &[Item], root: &Rng) -> Result<()> {
    if cfg.encoder_warm_epochs == 0 {
        return Ok(());
    }
    let l = model.num_patches();
    let bpe = batches_per_epoch(items.len(), cfg.batch_size);
    let warmup = cfg.effective_warmup_epochs().min(cfg.encoder_warm_epochs) * bpe;
    let sched = LrSchedule::new(cfg.peak_lr, warmup, cfg.encoder_warm_epochs * bpe)?;
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let mut step = 0;
    for epoch in 0..cfg.encoder_warm_epochs {
        let erng = root.split(epoch as u64);
        let order = erng.split(0).permutation(items.len());
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainItem> = chunk
                .iter()
                .map(|&i| {
                    let mut masked = erng.split(1 + i as u64).permutation(l);
                    masked.truncate(mask_budget(l, cfg.mask_ratio));
                    masked.sort_unstable();
                    TrainItem {
                        patches: items[i].patches.clone(),
                        masked,
                    }
                })
                .collect();
            total += train_step(model, store, &mut opt, &batch, sched.lr(step))? * batch.len() as f64;
            step += 1;
        }
        log::info!("encoder warm-up epoch {epoch}: mim_loss {:.5}", total / items.len() as f64);
    }
    Ok(())
}

fn cache_tokens(model: &MaeModel, store: &ParamStore, items: &mut [Item]) -> Result<()> {
    for item in items.iter_mut() {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(&item.patches);
        let enc = model.encode(&mut tape, &bound, x, &[])?;
        let tokens = model.encoder_tokens(&mut tape, &enc)?;
        let mut fc = tape.to_tensor(tokens.class_token);
        let mut f = tape.to_tensor(tokens.patch_tokens);
        fc.requires_grad = false;
        f.requires_grad = false;
        item.frozen = Some((fc, f));
    }
    Ok(())
}

pub fn run(cfg: &RunConfig) -> Result<Vec<EpochRow>> {
    if cfg.parts < 2 {
        return Err(Error::Config(format!("part learning needs parts >= 2, got {}", cfg.parts)));
    }
    let data = load_dataset(cfg)?;
    let truth = load_patch_labels(cfg, &data)?;
    let pg = patch_grid(cfg, &data)?;
    let root = Rng::new(cfg.seed);

    let mut store = ParamStore::new();
    let model = MaeModel::init(&mut store, mae_config(cfg, pg)?, &mut root.split(0))?;
    if let Some(path) = &cfg.init_checkpoint {
        let n = checkpoint::restore(&mut store, &checkpoint::load(path)?, ENCODER_PREFIX)?;
        log::info!("restored {n} encoder tensors from {}", path.display());
    }
    let mut items = data
        .images
        .iter()
        .map(|img| {
            Ok(Item {
                image: img.clone(),
                patches: patchify(img, &pg)?,
                frozen: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    warm_encoder(cfg, &model, &mut store, &items, &root.split(2))?;

    let mut init_rng = root.split(1);
    let width = cfg.enc_width;
    let attention = PartAttentionParams::init(
        &mut store,
        ATTENTION_PREFIX,
        width,
        cfg.parts,
        cfg.attn_bottleneck,
        cfg.attn_embed,
        &mut init_rng,
    )?;
    let decoder = DecoderParams::init(
        &mut store,
        RECON_PREFIX,
        cfg.parts,
        width,
        cfg.decoder_blocks,
        cfg.decoder_base,
        cfg.decoder_kernel,
        &mut init_rng,
    )?;
    store.set_trainable(DECODER_PREFIX, false);
    if !cfg.joint_encoder {
        store.set_trainable(ENCODER_PREFIX, false);
        cache_tokens(&model, &store, &mut items)?;
    }
    let modules = Modules {
        cfg,
        model,
        attention,
        decoder,
    };

    std::fs::create_dir_all(&cfg.out)?;
    let mut metrics = csv_writer(&cfg.out.join("metrics.csv"), &METRICS_HEADER)?;
    let bpe = batches_per_epoch(items.len(), cfg.batch_size);
    let sched = LrSchedule::new(cfg.part_lr, cfg.effective_warmup_epochs() * bpe, cfg.epochs * bpe)?;
    let mut opt = AdamW::new(&store, cfg.weight_decay);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let epochs_rng = root.split(3);
    for epoch in 0..cfg.epochs {
        let order = epochs_rng.split(epoch as u64).permutation(items.len());
        let (mut rec, mut div) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Item> = chunk.iter().map(|&i| &items[i]).collect();
            let (stats, grads) = batch_gradients(&store, &batch, |tape, bound, item| {
                let (total, extras, _) = modules.objective(tape, bound, item)?;
                Ok((total, extras))
            })?;
            apply_gradients(&mut store, &mut opt, &grads, stats.loss, sched.lr(step))?;
            step += 1;
            rec += stats.extras[0] * batch.len() as f64;
            div += stats.extras[1] * batch.len() as f64;
        }
        let n = items.len() as f64;
        let (rec, div) = (rec / n, div / n);
        let fg_iou = match &truth {
            Some(truth) => {
                let mut sum = 0.0;
                let mut counted = 0;
                for (item, t) in items.iter().zip(truth) {
                    let (_, seg) = modules.raw_maps(&store, item)?;
                    if let Some(v) = foreground_iou(&seg.labels, cfg.parts, t) {
                        sum += v;
                        counted += 1;
                    }
                }
                (counted > 0).then(|| sum / counted as f64)
            }
            None => None,
        };
        let row = EpochRow {
            epoch,
            recon_loss: rec,
            div_loss: div,
            total_loss: rec + cfg.lambda * div,
            fg_iou,
        };
        log::info!(
            "partlearn epoch {epoch}: recon {:.5} div {:.5} fg_iou {}",
            row.recon_loss,
            row.div_loss,
            fg_iou.map_or("-".into(), |v| format!("{v:.4}"))
        );
        write_row(
            &mut metrics,
            &[
                epoch.to_string(),
                row.recon_loss.to_string(),
                row.div_loss.to_string(),
                row.total_loss.to_string(),
                fg_iou.map_or_else(String::new, |v| v.to_string()),
            ],
        )?;
        rows.push(row);
    }

    let mut segs = Vec::with_capacity(items.len());
    let mut fg = csv_writer(&cfg.out.join("foreground.csv"), &["image_id", "patch_indices"])?;
    for (i, item) in items.iter().enumerate() {
        let (maps, seg) = modules.raw_maps(&store, item)?;
        let kept = select_foreground(&maps, cfg.parts, pg.grid, cfg.keep_fraction)?;
        let joined = kept.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        write_row(&mut fg, &[i.to_string(), joined])?;
        segs.push(seg);
    }
    save_segmentations(&segs, &cfg.out.join("segmentation.sseg"))?;
    checkpoint::save(&store, &cfg.out.join("partlearn.ckpt"))?;
    if cfg.dump_recon {
        dump_reconstructions(&modules, &store, &items, &data, &pg, cfg)?;
    }
    Ok(rows)
}

fn dump_reconstructions(
    modules: &Modules,
    store: &ParamStore,
    items: &[Item],
    data: &Dataset,
    pg: &PatchGrid,
    cfg: &RunConfig,
) -> Result<()> {
    let mut images = Vec::with_capacity(items.len());
    for item in items {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (_, _, recon) = modules.objective(&mut tape, &bound, item)?;
        images.push(tape.to_tensor(recon));
    }
    debug_assert_eq!(pg.image_shape(), [data.channels, data.height, data.width]);
    Dataset {
        channels: data.channels,
        height: data.height,
        width: data.width,
        images,
    }
    .save(&cfg.out.join("reconstructions.sten"))
}
