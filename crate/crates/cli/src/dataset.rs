//! `STEN` image files and the synthetic generators.
//!
//! Header (24 bytes, little-endian): `"STEN"`, version `u16`, dtype `u16`
//! (1 = f64), then count, channels, height and width as `u32`. Images follow
//! back to back, each `channels x height x width` row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use semmae::numerics::{Rng, Tensor};
use semmae::partlearn::Grid;
use semmae::{Error, Result};

use crate::config::DatasetKind;

pub const MAGIC: &[u8; 4] = b"STEN";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u16 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub images: Vec<Tensor>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&DTYPE_F64.to_le_bytes())?;
        for v in [self.images.len(), self.channels, self.height, self.width] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for img in &self.images {
            for v in img.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("truncated dataset header: {e}")))?;
        if &header[..4] != MAGIC {
            return Err(Error::Format(format!("bad dataset magic {:?}", &header[..4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        if u16_at(4) != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", u16_at(4))));
        }
        if u16_at(6) != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dataset dtype code {}", u16_at(6))));
        }
        let (count, channels, height, width) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Format(format!("degenerate image shape {channels}x{height}x{width}")));
        }
        let n = channels * height * width;
        let mut buf = vec![0u8; n * 8];
        let mut images = Vec::with_capacity(count);
        for i in 0..count {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Format(format!("dataset truncated at image {i}: {e}")))?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            images.push(Tensor::from_vec(&[channels, height, width], data)?);
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after last image".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            images,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Format(format!("cannot open dataset {}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

/// Ground-truth labels live next to the dataset: `x.sten` -> `x.labels`.
pub fn labels_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("labels")
}

/// Per-patch majority label (ties to the smaller label) for a `1 x H x W`
/// label image.
pub fn patch_labels(labels: &Tensor, patch_size: usize) -> Result<Vec<usize>> {
    let (h, w) = (labels.shape()[1], labels.shape()[2]);
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Config(format!("labels {h}x{w} not divisible by patch_size {patch_size}")));
    }
    let max = labels.data().iter().fold(0.0f64, |m, &v| m.max(v)) as usize;
    let grid = Grid::new(h / patch_size, w / patch_size);
    let mut out = Vec::with_capacity(grid.len());
    for gy in 0..grid.h {
        for gx in 0..grid.w {
            let mut votes = vec![0usize; max + 1];
            for y in gy * patch_size..(gy + 1) * patch_size {
                for x in gx * patch_size..(gx + 1) * patch_size {
                    votes[labels.data()[y * w + x] as usize] += 1;
                }
            }
            let best = votes.iter().enumerate().fold(0, |b, (i, &c)| if c > votes[b] { i } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

/// Distinct saturated colours; shapes draw from these with small jitter.
const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.35, 0.90],
    [0.15, 0.80, 0.25],
    [0.95, 0.85, 0.10],
    [0.75, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.05, 0.05, 0.05],
];

fn jittered(rng: &mut Rng, base: [f64; 3]) -> [f64; 3] {
    base.map(|c| (c + rng.uniform_range(-0.08, 0.08)).clamp(0.0, 1.0))
}

/// Low-contrast grey background with an oriented ripple and pixel noise.
fn textured_background(rng: &mut Rng, h: usize, w: usize) -> Vec<[f64; 3]> {
    let grey = rng.uniform_range(0.35, 0.5);
    let angle = rng.uniform_range(0.0, std::f64::consts::PI);
    let freq = rng.uniform_range(0.6, 1.2);
    let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    let (fx, fy) = (freq * angle.cos(), freq * angle.sin());
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let v = grey + 0.06 * (fx * x + fy * y + phase).sin();
            [0, 1, 2].map(|_| v + 0.02 * rng.normal())
        })
        .collect()
}

fn to_tensors(pixels: &[[f64; 3]], labels: &[usize], h: usize, w: usize) -> (Tensor, Tensor) {
    let mut img = vec![0.0; 3 * h * w];
    for (i, p) in pixels.iter().enumerate() {
        for c in 0..3 {
            img[c * h * w + i] = p[c];
        }
    }
    let lab = labels.iter().map(|&l| l as f64).collect();
    (
        Tensor::from_vec(&[3, h, w], img).expect("non-empty image"),
        Tensor::from_vec(&[1, h, w], lab).expect("non-empty labels"),
    )
}

/// Two Gaussian colour blobs (labels 1 and 2) over a textured background
/// (label 0). A pixel belongs to a blob where that blob's weight exceeds 1/2
/// and dominates the other.
fn two_blobs(rng: &mut Rng, h: usize, w: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let scale = h.min(w) as f64;
    let sigmas = [rng.uniform_range(0.11, 0.15) * scale, rng.uniform_range(0.11, 0.15) * scale];
    let margin = 1.2 * sigmas[0].max(sigmas[1]);
    let min_dist = 2.6 * sigmas[0].max(sigmas[1]);
    let mut centres = [(0.0, 0.0); 2];
    for attempt in 0.. {
        for c in &mut centres {
            *c = (
                rng.uniform_range(margin, h as f64 - margin),
                rng.uniform_range(margin, w as f64 - margin),
            );
        }
        let d = ((centres[0].0 - centres[1].0).powi(2) + (centres[0].1 - centres[1].1).powi(2)).sqrt();
        if d >= min_dist || attempt >= 1000 {
            break;
        }
    }
    let colours = [jittered(rng, PALETTE[0]), jittered(rng, PALETTE[1])];
    let mut pixels = textured_background(rng, h, w);
    let mut labels = vec![0; h * w];
    for (i, (p, l)) in pixels.iter_mut().zip(&mut labels).enumerate() {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        let weights = [0, 1].map(|b| {
            let d2 = (y - centres[b].0).powi(2) + (x - centres[b].1).powi(2);
            (-d2 / (2.0 * sigmas[b] * sigmas[b])).exp()
        });
        for b in 0..2 {
            for c in 0..3 {
                p[c] = p[c] * (1.0 - weights[b]) + colours[b][c] * weights[b];
            }
        }
        let top = if weights[1] > weights[0] { 1 } else { 0 };
        if weights[top] > 0.5 {
            *l = top + 1;
        }
    }
    (pixels, labels)
}

/// `k` disjoint discs and rectangles with distinct colours, labels `1..=k`.
fn k_parts(rng: &mut Rng, h: usize, w: usize, k: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut pixels = textured_background(rng, h, w);
    let mut labels = vec![0; h * w];
    let scale = h.min(w) as f64;
    let mut shrink = 1.0;
    'placement: loop {
        labels.iter_mut().for_each(|l| *l = 0);
        for part in 0..k {
            let mut placed = false;
            for _ in 0..200 {
                let half = rng.uniform_range(0.10, 0.17) * scale * shrink;
                let (cy, cx) = (
                    rng.uniform_range(half, h as f64 - half),
                    rng.uniform_range(half, w as f64 - half),
                );
                let disc = part % 2 == 0;
                let inside = |y: f64, x: f64| {
                    if disc {
                        (y - cy).powi(2) + (x - cx).powi(2) <= half * half
                    } else {
                        (y - cy).abs() <= half && (x - cx).abs() <= 0.8 * half
                    }
                };
                let cells: Vec<usize> = (0..h * w)
                    .filter(|&i| inside((i / w) as f64 + 0.5, (i % w) as f64 + 0.5))
                    .collect();
                // one-pixel gap to every other shape
                let clear = cells.iter().all(|&i| {
                    let (y, x) = ((i / w) as isize, (i % w) as isize);
                    (-1..=1).all(|dy| {
                        (-1..=1).all(|dx| {
                            let (ny, nx) = (y + dy, x + dx);
                            ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize || labels[ny as usize * w + nx as usize] == 0
                        })
                    })
                });
                if clear && !cells.is_empty() {
                    cells.iter().for_each(|&i| labels[i] = part + 1);
                    placed = true;
                    break;
                }
            }
            if !placed {
                shrink *= 0.85;
                continue 'placement;
            }
        }
        break;
    }
    let colours: Vec<[f64; 3]> = (0..k).map(|p| jittered(rng, PALETTE[p])).collect();
    for (p, &l) in pixels.iter_mut().zip(&labels) {
        if l > 0 {
            *p = colours[l - 1];
        }
    }
    (pixels, labels)
}

/// Two-colour checkerboard; labels follow the cell parity.
fn checker(rng: &mut Rng, h: usize, w: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let cell = [4usize, 8][rng.below(2)];
    let (oy, ox) = (rng.below(cell), rng.below(cell));
    let (ia, ib) = (rng.below(4), 4 + rng.below(4));
    let a = jittered(rng, PALETTE[ia]);
    let b = jittered(rng, PALETTE[ib]);
    let mut pixels = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let parity = ((y + oy) / cell + (x + ox) / cell) % 2;
            labels.push(parity);
            pixels.push(if parity == 0 { a } else { b });
        }
    }
    (pixels, labels)
}

/// Generates `count` images and their label maps. Image `i` draws only from
/// the seed's stream `i`, so any prefix of a larger dataset is identical.
pub fn generate(kind: DatasetKind, count: usize, height: usize, width: usize, k: usize, seed: u64) -> (Dataset, Dataset) {
    let root = Rng::new(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = root.split(i as u64);
        let (pixels, lab) = match kind {
            DatasetKind::TwoBlobs => two_blobs(&mut rng, height, width),
            DatasetKind::KParts => k_parts(&mut rng, height, width, k),
            DatasetKind::Checker => checker(&mut rng, height, width),
        };
        let (img, lab) = to_tensors(&pixels, &lab, height, width);
        images.push(img);
        labels.push(lab);
    }
    (
        Dataset {
            channels: 3,
            height,
            width,
            images,
        },
        Dataset {
            channels: 1,
            height,
            width,
            images: labels,
        },
    )
}
