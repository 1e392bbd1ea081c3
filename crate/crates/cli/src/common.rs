use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use semmae::mae_core::{MaeConfig, PatchGrid};
use semmae::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::{labels_path, patch_labels, Dataset};
use crate::formats::csv_error;

pub type CsvOut = csv::Writer<BufWriter<File>>;

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .dataset
        .as_deref()
        .ok_or_else(|| Error::Config("no dataset given (set dataset=PATH)".into()))?;
    let data = Dataset::load(path)?;
    if data.is_empty() {
        return Err(Error::Format(format!("dataset {} holds no images", path.display())));
    }
    if data.channels != 3 {
        return Err(Error::Format(format!("expected RGB images, dataset has {} channels", data.channels)));
    }
    Ok(data)
}

/// Per-patch ground-truth labels for every image, if the sidecar exists.
pub fn load_patch_labels(cfg: &RunConfig, data: &Dataset) -> Result<Option<Vec<Vec<usize>>>> {
    let Some(path) = cfg.dataset.as_deref().map(labels_path) else {
        return Ok(None);
    };
    if !path.exists() {
        return Ok(None);
    }
    let labels = Dataset::load(&path)?;
    if labels.len() != data.len() || labels.height != data.height || labels.width != data.width || labels.channels != 1
    {
        return Err(Error::Format(format!(
            "label file {} does not match the dataset",
            path.display()
        )));
    }
    labels
        .images
        .iter()
        .map(|l| patch_labels(l, cfg.patch_size))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn patch_grid(cfg: &RunConfig, data: &Dataset) -> Result<PatchGrid> {
    PatchGrid::for_image(data.channels, data.height, data.width, cfg.patch_size)
}

pub fn mae_config(cfg: &RunConfig, patch: PatchGrid) -> Result<MaeConfig> {
    let mc = MaeConfig {
        patch,
        enc_width: cfg.enc_width,
        enc_heads: cfg.enc_heads,
        enc_depth: cfg.enc_depth,
        dec_width: cfg.dec_width,
        dec_heads: cfg.dec_heads,
        dec_depth: cfg.dec_depth,
        mlp_ratio: cfg.mlp_ratio,
    };
    mc.validate()?;
    Ok(mc)
}

pub fn csv_writer(path: &Path, header: &[&str]) -> Result<CsvOut> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header).map_err(csv_error)?;
    Ok(w)
}

pub fn write_row(w: &mut CsvOut, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(csv_error)?;
    // keep partial progress visible if a later epoch aborts
    w.flush()?;
    Ok(())
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}
