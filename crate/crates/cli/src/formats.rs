//! Segmentation dumps and mask-plan CSVs.
//!
//! `SSEG` layout (little-endian): `"SSEG"`, version `u32`, then count, parts,
//! grid height and grid width as `u32`, followed by `count * h * w` part
//! labels as `u32`, one image after another.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use semmae::mask_scheduler::MaskPlan;
use semmae::partlearn::{Grid, PartSegmentation};
use semmae::{Error, Result};

pub const SEG_MAGIC: &[u8; 4] = b"SSEG";
pub const SEG_VERSION: u32 = 1;

pub fn write_segmentations(segs: &[PartSegmentation], w: &mut impl Write) -> Result<()> {
    let (parts, grid) = match segs.first() {
        Some(s) => (s.parts(), s.grid),
        None => return Err(Error::Contract("no segmentations to write".into())),
    };
    if segs.iter().any(|s| s.parts() != parts || s.grid != grid) {
        return Err(Error::Contract("segmentations disagree on part count or grid".into()));
    }
    w.write_all(SEG_MAGIC)?;
    for v in [SEG_VERSION, segs.len() as u32, parts as u32, grid.h as u32, grid.w as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for s in segs {
        for &l in &s.labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_segmentations(r: &mut impl Read) -> Result<Vec<PartSegmentation>> {
    let mut header = [0u8; 24];
    r.read_exact(&mut header)
        .map_err(|e| Error::Format(format!("truncated segmentation header: {e}")))?;
    if &header[..4] != SEG_MAGIC {
        return Err(Error::Format(format!("bad segmentation magic {:?}", &header[..4])));
    }
    let field = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if field(0) != SEG_VERSION as usize {
        return Err(Error::Format(format!("unsupported segmentation version {}", field(0))));
    }
    let (count, parts, grid) = (field(1), field(2), Grid::new(field(3), field(4)));
    let mut buf = vec![0u8; grid.len() * 4];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("segmentation truncated at image {i}: {e}")))?;
        let labels = buf.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        out.push(
            PartSegmentation::from_labels(labels, parts, grid)
                .map_err(|e| Error::Format(format!("segmentation {i}: {e}")))?,
        );
    }
    Ok(out)
}

pub fn save_segmentations(segs: &[PartSegmentation], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_segmentations(segs, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_segmentations(path: &Path) -> Result<Vec<PartSegmentation>> {
    let f = File::open(path)
        .map_err(|e| Error::Format(format!("cannot open segmentation {}: {e}", path.display())))?;
    read_segmentations(&mut BufReader::new(f))
}

pub fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}

/// One row per (epoch, image):
/// `epoch,image_id,alpha,hflip,num_mask_0..,part_order,masked_indices`, lists
/// joined by `;` and indices given in the coordinates of the (possibly flipped)
/// image the model sees.
pub struct PlanWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> PlanWriter<W> {
    pub fn new(w: W, parts: usize) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["epoch", "image_id", "alpha", "hflip"].map(String::from).to_vec();
        header.extend((0..parts).map(|i| format!("num_mask_{i}")));
        header.push("part_order".to_string());
        header.push("masked_indices".to_string());
        inner.write_record(&header).map_err(csv_error)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, epoch: usize, image: usize, flipped: bool, plan: &MaskPlan) -> Result<()> {
        let mut row = vec![
            epoch.to_string(),
            image.to_string(),
            plan.alpha.to_string(),
            (flipped as u8).to_string(),
        ];
        row.extend(plan.num_mask.iter().map(ToString::to_string));
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        row.push(join(&plan.order));
        row.push(join(plan.masked_indices.as_deref().unwrap_or_default()));
        self.inner.write_record(&row).map_err(csv_error)
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}
