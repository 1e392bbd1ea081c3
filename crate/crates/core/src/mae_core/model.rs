use crate::error::{Error, Result};
use crate::numerics::{fan_in_uniform, Rng, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::partlearn::{EncoderTokens, Grid};

use super::patch::PatchGrid;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaeConfig {
    pub patch: PatchGrid,
    pub enc_width: usize,
    pub enc_heads: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub dec_depth: usize,
    pub mlp_ratio: usize,
}

impl MaeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, width, heads) in [
            ("encoder", self.enc_width, self.enc_heads),
            ("decoder", self.dec_width, self.dec_heads),
        ] {
            if heads == 0 || width % heads != 0 {
                return Err(Error::Config(format!("{name} width {width} not divisible by {heads} heads")));
            }
            if width % 4 != 0 {
                return Err(Error::Config(format!(
                    "{name} width {width} must be a multiple of 4 for 2-D positional encodings"
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        Self {
            w: store.register(format!("{name}.w"), fan_in_uniform(&[din, dout], din, rng)),
            b: store.register(format!("{name}.b"), Tensor::zeros(&[dout])),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound[self.w])?;
        tape.add_row(y, bound[self.b])
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn init(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::filled(&[width], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x, LN_EPS)?;
        let y = tape.mul_row(y, bound[self.gain])?;
        tape.add_row(y, bound[self.bias])
    }
}

/// Pre-norm transformer block.
#[derive(Debug, Clone, Copy)]
struct Block {
    heads: usize,
    width: usize,
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn init(store: &mut ParamStore, name: &str, width: usize, heads: usize, mlp_ratio: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            width,
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), width),
            qkv: Linear::init(store, &format!("{name}.qkv"), width, 3 * width, rng),
            proj: Linear::init(store, &format!("{name}.proj"), width, width, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), width),
            fc1: Linear::init(store, &format!("{name}.fc1"), width, mlp_ratio * width, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), mlp_ratio * width, width, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.ln1.apply(tape, bound, x)?;
        let qkv = self.qkv.apply(tape, bound, h)?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = tape.slice_cols(qkv, head * dh, dh)?;
            let k = tape.slice_cols(qkv, self.width + head * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * self.width + head * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let att = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(att, v)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let attn = self.proj.apply(tape, bound, merged)?;
        let x = tape.add(x, attn)?;

        let h = self.ln2.apply(tape, bound, x)?;
        let h = self.fc1.apply(tape, bound, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.apply(tape, bound, h)?;
        tape.add(x, h)
    }
}

/// Fixed 2-D sine-cosine table with a leading all-zero row for the class
/// token: `(L + 1) x width`.
pub fn sincos_table(grid: Grid, width: usize) -> Vec<f64> {
    let quarter = width / 4;
    let mut out = vec![0.0; (grid.len() + 1) * width];
    for y in 0..grid.h {
        for x in 0..grid.w {
            let row = &mut out[(1 + y * grid.w + x) * width..(2 + y * grid.w + x) * width];
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                row[k] = (y as f64 * omega).sin();
                row[quarter + k] = (y as f64 * omega).cos();
                row[2 * quarter + k] = (x as f64 * omega).sin();
                row[3 * quarter + k] = (x as f64 * omega).cos();
            }
        }
    }
    out
}

/// Encoder output for one image.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `(1 + visible) x enc_width`; row 0 is the class token.
    pub tokens: Var,
    /// Visible patch indices, ascending.
    pub visible: Vec<usize>,
    pub seq_len: usize,
}

#[derive(Debug, Clone)]
pub struct MaeOutput {
    pub encoded: Encoded,
    /// `L x patch_dim`
    pub predicted: Var,
}

/// Toy MAE: the encoder sees only visible patches; the decoder fills masked
/// positions with a learned mask token and regresses raw pixels.
#[derive(Debug, Clone)]
pub struct MaeModel {
    pub cfg: MaeConfig,
    patch_embed: Linear,
    cls_token: ParamId,
    enc_blocks: Vec<Block>,
    enc_norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    head: Linear,
    enc_pos: Vec<f64>,
    dec_pos: Vec<f64>,
}

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";

impl MaeModel {
    /// Registers encoder parameters under `encoder.` and decoder parameters
    /// under `decoder.`.
    pub fn init(store: &mut ParamStore, cfg: MaeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let pd = cfg.patch.patch_dim();
        let e = ENCODER_PREFIX;
        let d = DECODER_PREFIX;
        let patch_embed = Linear::init(store, &format!("{e}patch_embed"), pd, cfg.enc_width, rng);
        let cls = Tensor::from_vec(&[1, cfg.enc_width], (0..cfg.enc_width).map(|_| 0.02 * rng.normal()).collect())?;
        let cls_token = store.register(format!("{e}cls_token"), cls);
        let enc_blocks = (0..cfg.enc_depth)
            .map(|i| Block::init(store, &format!("{e}block.{i}"), cfg.enc_width, cfg.enc_heads, cfg.mlp_ratio, rng))
            .collect();
        let enc_norm = LayerNorm::init(store, &format!("{e}norm"), cfg.enc_width);

        let dec_embed = Linear::init(store, &format!("{d}embed"), cfg.enc_width, cfg.dec_width, rng);
        let mask = Tensor::from_vec(&[1, cfg.dec_width], (0..cfg.dec_width).map(|_| 0.02 * rng.normal()).collect())?;
        let mask_token = store.register(format!("{d}mask_token"), mask);
        let dec_blocks = (0..cfg.dec_depth)
            .map(|i| Block::init(store, &format!("{d}block.{i}"), cfg.dec_width, cfg.dec_heads, cfg.mlp_ratio, rng))
            .collect();
        let dec_norm = LayerNorm::init(store, &format!("{d}norm"), cfg.dec_width);
        let head = Linear::init(store, &format!("{d}head"), cfg.dec_width, pd, rng);
        Ok(Self {
            cfg,
            patch_embed,
            cls_token,
            enc_blocks,
            enc_norm,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            head,
            enc_pos: sincos_table(cfg.patch.grid, cfg.enc_width),
            dec_pos: sincos_table(cfg.patch.grid, cfg.dec_width),
        })
    }

    pub fn num_patches(&self) -> usize {
        self.cfg.patch.num_patches()
    }

    fn visible_set(&self, masked: &[usize]) -> Result<Vec<usize>> {
        let l = self.num_patches();
        let mut is_masked = vec![false; l];
        for &m in masked {
            if m >= l {
                return Err(Error::Contract(format!("masked index {m} out of range for {l} patches")));
            }
            if is_masked[m] {
                return Err(Error::Contract(format!("masked index {m} appears twice")));
            }
            is_masked[m] = true;
        }
        Ok((0..l).filter(|&p| !is_masked[p]).collect())
    }

    /// Runs the encoder on the unmasked rows of `patches` (`L x patch_dim`).
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, patches: Var, masked: &[usize]) -> Result<Encoded> {
        let l = self.num_patches();
        let (w, pd) = (self.cfg.enc_width, self.cfg.patch.patch_dim());
        if tape.shape(patches) != [l, pd] {
            return Err(Error::Shape(format!(
                "patches {:?}, expected [{l}, {pd}]",
                tape.shape(patches)
            )));
        }
        let visible = self.visible_set(masked)?;
        let mut rows = vec![(bound[self.cls_token], 0)];
        if !visible.is_empty() {
            let pos = tape.constant(&[l + 1, w], self.enc_pos.clone())?;
            let src: Vec<(Var, usize)> = visible.iter().map(|&p| (patches, p)).collect();
            let x = tape.gather_rows(&src)?;
            let x = self.patch_embed.apply(tape, bound, x)?;
            let pos_src: Vec<(Var, usize)> = visible.iter().map(|&p| (pos, p + 1)).collect();
            let pos_vis = tape.gather_rows(&pos_src)?;
            let x = tape.add(x, pos_vis)?;
            rows.extend((0..visible.len()).map(|i| (x, i)));
        }
        let mut x = tape.gather_rows(&rows)?;
        for block in &self.enc_blocks {
            x = block.apply(tape, bound, x)?;
        }
        let tokens = self.enc_norm.apply(tape, bound, x)?;
        Ok(Encoded {
            tokens,
            seq_len: visible.len() + 1,
            visible,
        })
    }

    /// Decodes encoder output to `L x patch_dim` pixel predictions.
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, encoded: &Encoded) -> Result<Var> {
        let l = self.num_patches();
        let w = self.cfg.dec_width;
        let x = self.dec_embed.apply(tape, bound, encoded.tokens)?;
        let mut rank = vec![None; l];
        for (r, &p) in encoded.visible.iter().enumerate() {
            rank[p] = Some(r);
        }
        let mut rows = Vec::with_capacity(l + 1);
        rows.push((x, 0));
        for r in &rank {
            rows.push(match r {
                Some(r) => (x, 1 + r),
                None => (bound[self.mask_token], 0),
            });
        }
        let full = tape.gather_rows(&rows)?;
        let pos = tape.constant(&[l + 1, w], self.dec_pos.clone())?;
        let mut x = tape.add(full, pos)?;
        for block in &self.dec_blocks {
            x = block.apply(tape, bound, x)?;
        }
        let x = self.dec_norm.apply(tape, bound, x)?;
        let out = self.head.apply(tape, bound, x)?;
        let patch_rows: Vec<(Var, usize)> = (1..=l).map(|i| (out, i)).collect();
        tape.gather_rows(&patch_rows)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, patches: Var, masked: &[usize]) -> Result<MaeOutput> {
        let encoded = self.encode(tape, bound, patches, masked)?;
        let predicted = self.decode(tape, bound, &encoded)?;
        Ok(MaeOutput { encoded, predicted })
    }

    /// Class token (`C x 1`) and patch tokens (`C x L`) from an unmasked pass.
    pub fn encoder_tokens(&self, tape: &mut Tape, encoded: &Encoded) -> Result<EncoderTokens> {
        let l = self.num_patches();
        if encoded.visible.len() != l {
            return Err(Error::Contract("encoder tokens need a pass with no masked patches".into()));
        }
        let cls = tape.gather_rows(&[(encoded.tokens, 0)])?;
        let fc = tape.transpose(cls)?;
        let rows: Vec<(Var, usize)> = (1..=l).map(|i| (encoded.tokens, i)).collect();
        let patches = tape.gather_rows(&rows)?;
        let f = tape.transpose(patches)?;
        EncoderTokens::new(tape, fc, f, self.cfg.patch.grid)
    }
}

/// Mean squared error over the masked rows only.
pub fn mim_loss(tape: &mut Tape, predicted: Var, target: Var, masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::Contract("masked-pixel loss is undefined with no masked patches".into()));
    }
    if tape.shape(predicted) != tape.shape(target) {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.shape(predicted),
            tape.shape(target)
        )));
    }
    let l = tape.shape(predicted)[0];
    if let Some(&bad) = masked.iter().find(|&&m| m >= l) {
        return Err(Error::Contract(format!("masked index {bad} out of range for {l} rows")));
    }
    let p_rows: Vec<(Var, usize)> = masked.iter().map(|&m| (predicted, m)).collect();
    let t_rows: Vec<(Var, usize)> = masked.iter().map(|&m| (target, m)).collect();
    let p = tape.gather_rows(&p_rows)?;
    let t = tape.gather_rows(&t_rows)?;
    let d = tape.sub(p, t)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mae_core::optim::AdamW;
    use crate::mae_core::train::{train_step, TrainItem};
    use crate::numerics::gradcheck::check_gradients;

    fn tiny_cfg() -> MaeConfig {
        MaeConfig {
            patch: PatchGrid::for_image(3, 8, 8, 2).unwrap(),
            enc_width: 8,
            enc_heads: 2,
            enc_depth: 2,
            dec_width: 8,
            dec_heads: 2,
            dec_depth: 1,
            mlp_ratio: 2,
        }
    }

    fn build(seed: u64) -> (ParamStore, MaeModel) {
        let mut store = ParamStore::new();
        let model = MaeModel::init(&mut store, tiny_cfg(), &mut Rng::new(seed)).unwrap();
        (store, model)
    }

    fn random_patches(rng: &mut Rng, l: usize, pd: usize) -> Tensor {
        Tensor::from_vec(&[l, pd], (0..l * pd).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn encoder_sequence_length_tracks_visible_count() {
        let (store, model) = build(1);
        let (l, pd) = (model.num_patches(), model.cfg.patch.patch_dim());
        let patches = random_patches(&mut Rng::new(2), l, pd);
        let quarter_visible: Vec<usize> = (0..l).filter(|p| p % 4 != 0).collect();
        let all: Vec<usize> = (0..l).collect();
        for (masked, expect) in [(vec![], l + 1), (all, 1), (quarter_visible, 1 + (0.25 * l as f64).ceil() as usize)] {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.leaf(&patches);
            let out = model.forward(&mut tape, &bound, x, &masked).unwrap();
            assert_eq!(out.encoded.seq_len, expect);
            assert_eq!(tape.shape(out.encoded.tokens), &[expect, 8]);
            assert_eq!(tape.shape(out.predicted), &[l, pd]);
            assert!(tape.value(out.predicted).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn bad_mask_indices_are_contract_errors() {
        let (store, model) = build(1);
        let l = model.num_patches();
        let patches = random_patches(&mut Rng::new(3), l, model.cfg.patch.patch_dim());
        for masked in [vec![1, 1], vec![l]] {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.leaf(&patches);
            assert!(matches!(model.forward(&mut tape, &bound, x, &masked), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn encoder_tokens_come_from_unmasked_pass() {
        let (store, model) = build(4);
        let l = model.num_patches();
        let patches = random_patches(&mut Rng::new(5), l, model.cfg.patch.patch_dim());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(&patches);
        let enc = model.encode(&mut tape, &bound, x, &[]).unwrap();
        let tokens = model.encoder_tokens(&mut tape, &enc).unwrap();
        assert_eq!(tokens.channels(&tape), 8);
        assert_eq!(tape.shape(tokens.patch_tokens), &[8, l]);
        let partial = model.encode(&mut tape, &bound, x, &[0]).unwrap();
        assert!(matches!(model.encoder_tokens(&mut tape, &partial), Err(Error::Contract(_))));
    }

    #[test]
    fn sincos_rows() {
        let t = sincos_table(Grid::new(2, 2), 8);
        assert!(t[..8].iter().all(|&v| v == 0.0));
        // position (0, 0): sin terms 0, cos terms 1
        assert_eq!(&t[8..16], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        // position (1, 0), first frequency is 1
        assert_eq!(t[3 * 8], 1f64.sin());
    }

    #[test]
    fn mim_loss_examples() {
        let mut tape = Tape::new();
        let target = tape.constant(&[3, 2], vec![0.0; 6]).unwrap();
        let same = tape.constant(&[3, 2], vec![0.0, 0.0, 9.0, 9.0, 0.0, 0.0]).unwrap();
        let l = mim_loss(&mut tape, same, target, &[0, 2]).unwrap();
        assert_eq!(tape.scalar(l), 0.0);

        let twos = tape.constant(&[3, 2], vec![2.0; 6]).unwrap();
        let l = mim_loss(&mut tape, twos, target, &[1]).unwrap();
        assert_eq!(tape.scalar(l), 4.0);

        let s3 = 3f64.sqrt();
        let mixed = tape.constant(&[3, 2], vec![1.0, -1.0, 5.0, 5.0, s3, s3]).unwrap();
        let l = mim_loss(&mut tape, mixed, target, &[0, 2]).unwrap();
        assert!((tape.scalar(l) - 2.0).abs() < 1e-15);

        assert!(matches!(mim_loss(&mut tape, mixed, target, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn loss_gradient_is_zero_outside_masked_rows() {
        let mut rng = Rng::new(6);
        let pred = random_patches(&mut rng, 5, 4).with_grad();
        let target = random_patches(&mut rng, 5, 4);
        let mut tape = Tape::new();
        let (p, t) = (tape.leaf(&pred), tape.leaf(&target));
        let loss = mim_loss(&mut tape, p, t, &[1, 3]).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(p).unwrap();
        for row in [0, 2, 4] {
            assert!(g[row * 4..row * 4 + 4].iter().all(|&v| v == 0.0));
        }
        assert!(g[4..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let (store, model) = build(10 + seed);
            let mut rng = Rng::new(20 + seed);
            let (l, pd) = (model.num_patches(), model.cfg.patch.patch_dim());
            let patches = random_patches(&mut rng, l, pd).with_grad();
            let masked: Vec<usize> = rng.permutation(l)[..l * 3 / 4].to_vec();
            let target_data = patches.data().to_vec();
            let report = check_gradients(
                |tape, v| {
                    let bound = store.bind(tape);
                    let target = tape.constant(&[l, pd], target_data.clone())?;
                    let out = model.forward(tape, &bound, v[0], &masked)?;
                    mim_loss(tape, out.predicted, target, &masked)
                },
                &[patches],
                1e-5,
                Some(48),
            )
            .unwrap();
            assert!(report.passes(1e-5), "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn repeated_steps_reduce_loss() {
        let (mut store, model) = build(7);
        let mut rng = Rng::new(8);
        let (l, pd) = (model.num_patches(), model.cfg.patch.patch_dim());
        let batch: Vec<TrainItem> = (0..4)
            .map(|_| TrainItem {
                patches: random_patches(&mut rng, l, pd),
                masked: rng.permutation(l)[..l / 2].to_vec(),
            })
            .collect();
        let mut opt = AdamW::new(&store, 0.05);
        let first = train_step(&model, &mut store, &mut opt, &batch, 1e-2).unwrap();
        let mut last = first;
        for _ in 0..60 {
            last = train_step(&model, &mut store, &mut opt, &batch, 1e-2).unwrap();
        }
        assert!(last < 0.8 * first, "{first} -> {last}");
    }

    #[test]
    fn train_step_is_deterministic() {
        let run = || {
            let (mut store, model) = build(9);
            let mut rng = Rng::new(9);
            let (l, pd) = (model.num_patches(), model.cfg.patch.patch_dim());
            let batch: Vec<TrainItem> = (0..3)
                .map(|_| TrainItem {
                    patches: random_patches(&mut rng, l, pd),
                    masked: rng.permutation(l)[..l / 2].to_vec(),
                })
                .collect();
            let mut opt = AdamW::new(&store, 0.05);
            (0..3).map(|_| train_step(&model, &mut store, &mut opt, &batch, 1e-3).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), run().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let (mut store, model) = build(11);
        let (l, pd) = (model.num_patches(), model.cfg.patch.patch_dim());
        let mut patches = Tensor::zeros(&[l, pd]);
        patches.data_mut()[0] = f64::NAN;
        let batch = [TrainItem { patches, masked: vec![0] }];
        let mut opt = AdamW::new(&store, 0.05);
        match train_step(&model, &mut store, &mut opt, &batch, 1e-3) {
            Err(Error::NumericAbort { step, lr, grad_norms }) => {
                assert_eq!(step, 1);
                assert_eq!(lr, 1e-3);
                assert!(grad_norms.contains("encoder.patch_embed.w"));
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
