//! Part tokens, part attention maps, blur, diversity loss, and argmax
//! part segmentation.
//!
//! Given an encoder's class token `F_c` (`C x 1`) and patch tokens `F`
//! (`C x HW`), each of `N` parts gets a gated copy of the class token
//!
//! ```text
//! F_p[:, i] = F_c ∘ sigmoid(W_c2[i] · tanh(W_c1[i] · F_c))
//! ```
//!
//! and its attention map is a softmax over patch positions of
//! `F_pᵀ W_pᵀ W F`. Maps are blurred before being handed to the
//! reconstruction decoder; segmentation uses the raw maps.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{fan_in_uniform, Rng, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Patch-grid dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Class token and patch tokens recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncoderTokens {
    /// `C x 1`
    pub class_token: Var,
    /// `C x HW`
    pub patch_tokens: Var,
    pub grid: Grid,
}

impl EncoderTokens {
    pub fn new(tape: &Tape, class_token: Var, patch_tokens: Var, grid: Grid) -> Result<Self> {
        let (cs, ps) = (tape.shape(class_token), tape.shape(patch_tokens));
        match (cs, ps) {
            (&[c, 1], &[c2, hw]) if c == c2 && hw == grid.len() => Ok(Self {
                class_token,
                patch_tokens,
                grid,
            }),
            _ => Err(shape_err(format!(
                "encoder tokens: class {cs:?}, patches {ps:?}, grid {}x{}",
                grid.h, grid.w
            ))),
        }
    }

    pub fn channels(&self, tape: &Tape) -> usize {
        tape.shape(self.class_token)[0]
    }
}

/// Weights of the part-token embedding and the correlation embedding.
#[derive(Debug, Clone)]
pub struct PartAttentionParams {
    pub parts: usize,
    pub channels: usize,
    pub bottleneck: usize,
    pub embed: usize,
    /// Per part, `D x C`.
    w_c1: Vec<ParamId>,
    /// Per part, `C x D`.
    w_c2: Vec<ParamId>,
    /// `E x C`
    w_p: ParamId,
    /// `E x C`
    w: ParamId,
}

impl PartAttentionParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        parts: usize,
        bottleneck: usize,
        embed: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if parts < 2 {
            return Err(Error::Config(format!("need at least 2 parts, got {parts}")));
        }
        if channels == 0 || bottleneck == 0 || embed == 0 {
            return Err(Error::Config("attention widths must be positive".into()));
        }
        let mut w_c1 = Vec::with_capacity(parts);
        let mut w_c2 = Vec::with_capacity(parts);
        for i in 0..parts {
            w_c1.push(store.register(
                format!("{prefix}w_c1.{i}"),
                fan_in_uniform(&[bottleneck, channels], channels, rng),
            ));
            w_c2.push(store.register(
                format!("{prefix}w_c2.{i}"),
                fan_in_uniform(&[channels, bottleneck], bottleneck, rng),
            ));
        }
        let w_p = store.register(format!("{prefix}w_p"), fan_in_uniform(&[embed, channels], channels, rng));
        let w = store.register(format!("{prefix}w"), fan_in_uniform(&[embed, channels], channels, rng));
        Ok(Self {
            parts,
            channels,
            bottleneck,
            embed,
            w_c1,
            w_c2,
            w_p,
            w,
        })
    }

    pub fn w_c1(&self, part: usize) -> ParamId {
        self.w_c1[part]
    }

    pub fn w_c2(&self, part: usize) -> ParamId {
        self.w_c2[part]
    }

    pub fn w_p(&self) -> ParamId {
        self.w_p
    }

    pub fn w(&self) -> ParamId {
        self.w
    }

    fn check_channels(&self, tape: &Tape, tokens: &EncoderTokens) -> Result<()> {
        let c = tokens.channels(tape);
        if c != self.channels {
            return Err(shape_err(format!(
                "attention module expects {} channels, tokens have {c}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Part tokens `F_p` (`C x N`).
    pub fn part_tokens(&self, tape: &mut Tape, bound: &Bound, tokens: &EncoderTokens) -> Result<Var> {
        self.check_channels(tape, tokens)?;
        let fc = tokens.class_token;
        let mut cols = Vec::with_capacity(self.parts);
        for i in 0..self.parts {
            let hidden = tape.matmul(bound[self.w_c1[i]], fc)?;
            let hidden = tape.tanh(hidden);
            let gate = tape.matmul(bound[self.w_c2[i]], hidden)?;
            let gate = tape.sigmoid(gate);
            cols.push(tape.mul(fc, gate)?);
        }
        tape.concat_cols(&cols)
    }

    /// Attention maps `M = softmax_positions(F_pᵀ W_pᵀ W F)`.
    pub fn attention_maps(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        part_tokens: Var,
        tokens: &EncoderTokens,
    ) -> Result<AttentionMaps> {
        self.check_channels(tape, tokens)?;
        if tape.shape(part_tokens) != [self.channels, self.parts] {
            return Err(shape_err(format!(
                "part tokens {:?}, expected [{}, {}]",
                tape.shape(part_tokens),
                self.channels,
                self.parts
            )));
        }
        let queries = tape.matmul(bound[self.w_p], part_tokens)?; // E x N
        let keys = tape.matmul(bound[self.w], tokens.patch_tokens)?; // E x HW
        let queries_t = tape.transpose(queries)?;
        let logits = tape.matmul(queries_t, keys)?; // N x HW
        let maps = tape.softmax(logits, 1)?;
        Ok(AttentionMaps {
            maps,
            blurred: None,
            grid: tokens.grid,
            parts: self.parts,
        })
    }
}

/// `N x HW` per-part distributions over patch positions.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMaps {
    pub maps: Var,
    pub blurred: Option<Var>,
    pub grid: Grid,
    pub parts: usize,
}

impl AttentionMaps {
    pub fn from_var(tape: &Tape, maps: Var, grid: Grid) -> Result<Self> {
        match tape.shape(maps) {
            &[n, hw] if hw == grid.len() => Ok(Self {
                maps,
                blurred: None,
                grid,
                parts: n,
            }),
            s => Err(shape_err(format!("attention maps {s:?} do not fit grid {}x{}", grid.h, grid.w))),
        }
    }
}

/// Largest usable odd kernel for a grid, clamping `k` when it exceeds the grid.
pub fn effective_blur_kernel(kernel: usize, grid: Grid) -> Result<usize> {
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("blur kernel must be odd, got {kernel}")));
    }
    let limit = grid.h.min(grid.w);
    if kernel <= limit {
        return Ok(kernel);
    }
    let clamped = if limit % 2 == 1 { limit } else { limit.saturating_sub(1).max(1) };
    log::warn!("blur kernel {kernel} exceeds {}x{} grid, clamped to {clamped}", grid.h, grid.w);
    Ok(clamped)
}

/// Box-blurs each map with replicate padding and stores the result in `blurred`.
pub fn blur_maps(tape: &mut Tape, maps: &AttentionMaps, kernel: usize) -> Result<AttentionMaps> {
    let k = effective_blur_kernel(kernel, maps.grid)?;
    let blurred = tape.box_blur(maps.maps, maps.grid.h, maps.grid.w, k)?;
    Ok(AttentionMaps {
        blurred: Some(blurred),
        ..*maps
    })
}

pub const DIVERSITY_EPS: f64 = 1e-12;

/// Mean squared deviation of the maps' cosine-similarity matrix from identity.
pub fn diversity_loss(tape: &mut Tape, maps: &AttentionMaps) -> Result<Var> {
    let (n, hw) = (maps.parts, maps.grid.len());
    let values = tape.value(maps.maps);
    for i in 0..n {
        let norm: f64 = values[i * hw..(i + 1) * hw].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric(format!("attention map {i} has zero norm")));
        }
    }
    let unit = tape.normalize_rows(maps.maps, DIVERSITY_EPS)?;
    let unit_t = tape.transpose(unit)?;
    let cos = tape.matmul(unit, unit_t)?;
    let mut eye = vec![0.0; n * n];
    (0..n).for_each(|i| eye[i * n + i] = 1.0);
    let eye = tape.constant(&[n, n], eye)?;
    let dev = tape.sub(cos, eye)?;
    let sq = tape.square(dev)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (n * n) as f64))
}

/// Per-patch part labels from an argmax over parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartSegmentation {
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    pub grid: Grid,
}

impl PartSegmentation {
    pub fn from_labels(labels: Vec<usize>, parts: usize, grid: Grid) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(shape_err(format!(
                "{} labels for a {}x{} grid",
                labels.len(),
                grid.h,
                grid.w
            )));
        }
        let mut counts = vec![0; parts];
        for &l in &labels {
            if l >= parts {
                return Err(Error::Contract(format!("label {l} out of range for {parts} parts")));
            }
            counts[l] += 1;
        }
        Ok(Self { labels, counts, grid })
    }

    /// Every patch in one part.
    pub fn single_part(grid: Grid) -> Self {
        Self {
            labels: vec![0; grid.len()],
            counts: vec![grid.len()],
            grid,
        }
    }

    pub fn parts(&self) -> usize {
        self.counts.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn members(&self, part: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&p| self.labels[p] == part).collect()
    }

    /// Mirror image across the vertical axis.
    pub fn hflip(&self) -> Self {
        let Grid { h, w } = self.grid;
        let mut labels = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                labels[y * w + x] = self.labels[y * w + (w - 1 - x)];
            }
        }
        Self {
            labels,
            counts: self.counts.clone(),
            grid: self.grid,
        }
    }
}

/// Argmax segmentation of a row-major `parts x HW` map matrix; ties go to
/// the lowest part index.
pub fn segment(maps: &[f64], parts: usize, grid: Grid) -> Result<PartSegmentation> {
    let hw = grid.len();
    if parts == 0 || maps.len() != parts * hw {
        return Err(shape_err(format!(
            "{} map values for {parts} parts on a {}x{} grid",
            maps.len(),
            grid.h,
            grid.w
        )));
    }
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for i in 1..parts {
                if maps[i * hw + p] > maps[best * hw + p] {
                    best = i;
                }
            }
            best
        })
        .collect();
    PartSegmentation::from_labels(labels, parts, grid)
}

/// Segments the raw (unblurred) maps held on a tape.
pub fn segment_maps(tape: &Tape, maps: &AttentionMaps) -> Result<PartSegmentation> {
    segment(tape.value(maps.maps), maps.parts, maps.grid)
}

/// Indices of the `ceil(keep_fraction * HW)` patches with the highest
/// max-over-parts attention, ties to the lower index, sorted ascending.
pub fn select_foreground(maps: &[f64], parts: usize, grid: Grid, keep_fraction: f64) -> Result<Vec<usize>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    let hw = grid.len();
    if parts == 0 || maps.len() != parts * hw {
        return Err(shape_err(format!("{} map values for {parts} x {hw}", maps.len())));
    }
    let score = |p: usize| (0..parts).map(|i| maps[i * hw + p]).fold(f64::NEG_INFINITY, f64::max);
    let keep = ((keep_fraction * hw as f64).ceil() as usize).clamp(1, hw);
    let mut order: Vec<(f64, usize)> = (0..hw).map(|p| (score(p), p)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order[..keep].iter().map(|&(_, p)| p).collect();
    kept.sort_unstable();
    Ok(kept)
}
