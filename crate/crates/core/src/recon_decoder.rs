//! Conv + AdaIN reconstruction head and the part-learning objective.
//!
//! The blurred attention maps carry *where* each part is; the class token
//! carries *what it looks like*, injected through AdaIN scale and bias.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{fan_in_uniform, Rng, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::partlearn::AttentionMaps;

/// Guard added to the per-channel standard deviation.
pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub block_count: usize,
    pub kernel: usize,
    /// Output channels of each conv + AdaIN block.
    pub channels: Vec<usize>,
    convs: Vec<ParamId>,
    w_s: Vec<ParamId>,
    w_b: Vec<ParamId>,
    final_conv: ParamId,
    final_bias: ParamId,
}

impl DecoderParams {
    /// Blocks halve the channel count starting from `base_channels`
    /// (32 -> 16 -> 8 for three blocks), then a final conv maps to RGB.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        token_dim: usize,
        block_count: usize,
        base_channels: usize,
        kernel: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if block_count < 2 {
            return Err(Error::Config(format!("decoder needs at least 2 blocks, got {block_count}")));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("decoder kernel must be odd, got {kernel}")));
        }
        let channels: Vec<usize> = (0..block_count).map(|b| base_channels >> b).collect();
        if channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "{base_channels} base channels cannot be halved {block_count} times"
            )));
        }
        let (mut convs, mut w_s, mut w_b) = (Vec::new(), Vec::new(), Vec::new());
        let mut cin = in_channels;
        for (b, &cout) in channels.iter().enumerate() {
            convs.push(store.register(
                format!("{prefix}conv.{b}"),
                fan_in_uniform(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng),
            ));
            w_s.push(store.register(format!("{prefix}w_s.{b}"), fan_in_uniform(&[cout, token_dim], token_dim, rng)));
            w_b.push(store.register(format!("{prefix}w_b.{b}"), fan_in_uniform(&[cout, token_dim], token_dim, rng)));
            cin = cout;
        }
        let final_conv = store.register(
            format!("{prefix}conv.out"),
            fan_in_uniform(&[3, cin, kernel, kernel], cin * kernel * kernel, rng),
        );
        let final_bias = store.register(format!("{prefix}bias.out"), Tensor::zeros(&[3]));
        Ok(Self {
            block_count,
            kernel,
            channels,
            convs,
            w_s,
            w_b,
            final_conv,
            final_bias,
        })
    }

    pub fn conv(&self, block: usize) -> ParamId {
        self.convs[block]
    }

    pub fn final_conv(&self) -> ParamId {
        self.final_conv
    }

    pub fn final_bias(&self) -> ParamId {
        self.final_bias
    }

    pub fn w_s(&self, block: usize) -> ParamId {
        self.w_s[block]
    }

    pub fn w_b(&self, block: usize) -> ParamId {
        self.w_b[block]
    }
}

/// Adaptive instance normalization: each channel of `x` (`C x h x w`) is
/// standardized over space, then scaled by `(W_s F_c)_i` and shifted by
/// `(W_b F_c)_i`.
pub fn adain(tape: &mut Tape, x: Var, class_token: Var, w_s: Var, w_b: Var) -> Result<Var> {
    let c = tape.shape(x)[0];
    let scale = tape.matmul(w_s, class_token)?;
    let bias = tape.matmul(w_b, class_token)?;
    if tape.value(scale).len() != c || tape.value(bias).len() != c {
        return Err(shape_err(format!(
            "AdaIN scale {:?} / bias {:?} do not match {c} channels",
            tape.shape(scale),
            tape.shape(bias)
        )));
    }
    let normed = tape.instance_norm(x, ADAIN_EPS)?;
    let scaled = tape.mul_channel(normed, scale)?;
    tape.add_channel(scaled, bias)
}

/// Reconstructs a `3 x (H*patch) x (W*patch)` image from blurred maps.
pub fn decode(
    tape: &mut Tape,
    bound: &Bound,
    params: &DecoderParams,
    maps: &AttentionMaps,
    class_token: Var,
    patch_size: usize,
) -> Result<Var> {
    let blurred = maps
        .blurred
        .ok_or_else(|| Error::Contract("decode needs blurred attention maps".into()))?;
    let grid = maps.grid;
    let spatial = tape.reshape(blurred, &[maps.parts, grid.h, grid.w])?;
    let mut x = tape.upsample_nearest(spatial, patch_size)?;
    for b in 0..params.block_count {
        x = tape.conv2d(x, bound[params.convs[b]])?;
        x = adain(tape, x, class_token, bound[params.w_s[b]], bound[params.w_b[b]])?;
    }
    let out = tape.conv2d(x, bound[params.final_conv])?;
    tape.add_channel(out, bound[params.final_bias])
}

/// Channel-summed squared error averaged over the `H*W` pixel positions.
pub fn recon_loss(tape: &mut Tape, original: Var, reconstruction: Var) -> Result<Var> {
    let shape = tape.shape(original).to_vec();
    if shape != tape.shape(reconstruction) || shape.len() != 3 {
        return Err(shape_err(format!(
            "reconstruction loss needs equal C x H x W shapes, got {shape:?} and {:?}",
            tape.shape(reconstruction)
        )));
    }
    let diff = tape.sub(original, reconstruction)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / (shape[1] * shape[2]) as f64))
}

/// `L_rec + lambda * L_div`.
pub fn part_learning_loss(tape: &mut Tape, recon: Var, div: Var, lambda: f64) -> Result<Var> {
    let weighted = tape.scale(div, lambda);
    tape.add(recon, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean_std;
    use crate::partlearn::{blur_maps, Grid};

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::from_vec(shape, d.to_vec()).unwrap()
    }

    /// AdaIN with scale `s` and bias `b` realised through a 1-dim class token.
    fn adain_with(x: &Tensor, s: &[f64], b: &[f64]) -> Vec<f64> {
        let c = s.len();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let tok = tape.leaf(&t(&[1, 1], &[1.0]));
        let ws = tape.leaf(&t(&[c, 1], s));
        let wb = tape.leaf(&t(&[c, 1], b));
        let y = adain(&mut tape, xv, tok, ws, wb).unwrap();
        tape.value(y).to_vec()
    }

    #[test]
    fn adain_unit_scale_standardizes() {
        let mut rng = Rng::new(5);
        let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|_| rng.normal() * 3.0 + 1.0).collect()).unwrap();
        let y = adain_with(&x, &[1.0, 1.0], &[0.0, 0.0]);
        for ch in y.chunks(16) {
            let (mu, sd) = mean_std(ch);
            assert!(mu.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn adain_constant_channel_becomes_bias() {
        let x = Tensor::filled(&[1, 2, 2], 7.0);
        assert_eq!(adain_with(&x, &[3.0], &[0.25]), vec![0.25; 4]);
    }

    #[test]
    fn adain_scalar_oracle() {
        let x = t(&[1, 1, 2], &[0.0, 2.0]);
        let y = adain_with(&x, &[3.0], &[1.0]);
        let d = 1.0 + ADAIN_EPS;
        assert!((y[0] - (1.0 - 3.0 / d)).abs() < 1e-15);
        assert!((y[1] - (1.0 + 3.0 / d)).abs() < 1e-15);
    }

    #[test]
    fn adain_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(&[2, 2, 2]));
        let tok = tape.leaf(&Tensor::zeros(&[4, 1]));
        let ws = tape.leaf(&Tensor::zeros(&[3, 4]));
        let wb = tape.leaf(&Tensor::zeros(&[3, 4]));
        assert!(matches!(adain(&mut tape, x, tok, ws, wb), Err(Error::Shape(_))));
    }

    fn decoder_fixture(blocks: usize) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let p = DecoderParams::init(&mut store, "dec.", 2, 4, blocks, 8, 3, &mut Rng::new(1)).unwrap();
        (store, p)
    }

    fn run_decode(store: &ParamStore, p: &DecoderParams, blur: bool) -> Result<Tensor> {
        let grid = Grid::new(2, 2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let m = tape.leaf(&t(&[2, 4], &[0.1, 0.2, 0.3, 0.4, 0.4, 0.3, 0.2, 0.1]));
        let maps = AttentionMaps::from_var(&tape, m, grid)?;
        let maps = if blur { blur_maps(&mut tape, &maps, 1)? } else { maps };
        let tok = tape.leaf(&t(&[4, 1], &[0.5, -1.0, 2.0, 0.1]));
        let y = decode(&mut tape, &bound, p, &maps, tok, 4)?;
        Ok(tape.to_tensor(y))
    }

    #[test]
    fn decode_shape_contract() {
        for blocks in 2..4 {
            let (store, p) = decoder_fixture(blocks);
            let y = run_decode(&store, &p, true).unwrap();
            assert_eq!(y.shape(), &[3, 8, 8]);
        }
    }

    #[test]
    fn decode_needs_blur() {
        let (store, p) = decoder_fixture(2);
        assert!(matches!(run_decode(&store, &p, false), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_convs_yield_bias() {
        let (mut store, p) = decoder_fixture(2);
        for b in 0..2 {
            store.get_mut(p.conv(b)).data_mut().fill(0.0);
        }
        store.get_mut(p.final_conv()).data_mut().fill(0.0);
        store.get_mut(p.final_bias()).data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let y = run_decode(&store, &p, true).unwrap();
        for (ch, plane) in y.data().chunks(64).enumerate() {
            assert!(plane.iter().all(|&v| v == [0.1, 0.2, 0.3][ch]));
        }
        assert_eq!(run_decode(&store, &p, true).unwrap(), y);
    }

    #[test]
    fn too_few_blocks_rejected() {
        let mut store = ParamStore::new();
        assert!(DecoderParams::init(&mut store, "d.", 2, 4, 1, 8, 3, &mut Rng::new(0)).is_err());
    }

    fn loss_of(a: &[f64], b: &[f64], shape: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(shape, a));
        let y = tape.leaf(&t(shape, b));
        let l = recon_loss(&mut tape, x, y).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn recon_loss_examples() {
        assert_eq!(loss_of(&[0.3, 0.4], &[0.3, 0.4], &[1, 1, 2]), 0.0);
        assert_eq!(loss_of(&[1.0], &[0.0], &[1, 1, 1]), 1.0);
        assert_eq!(loss_of(&[1.0, 3.0], &[0.0, 0.0], &[1, 1, 2]), 5.0);
        // channels are summed, not averaged
        assert_eq!(loss_of(&[1.0, 1.0], &[0.0, 0.0], &[2, 1, 1]), 2.0);
    }

    #[test]
    fn total_loss_examples() {
        let mut tape = Tape::new();
        let one = tape.leaf(&Tensor::scalar(1.0));
        let zero = tape.leaf(&Tensor::scalar(0.0));
        let half = tape.leaf(&Tensor::scalar(0.5));
        let a = part_learning_loss(&mut tape, one, zero, 0.03).unwrap();
        assert_eq!(tape.scalar(a), 1.0);
        let b = part_learning_loss(&mut tape, zero, half, 0.03).unwrap();
        assert!((tape.scalar(b) - 0.015).abs() < 1e-15);
        let rec = tape.leaf(&Tensor::scalar(0.123));
        let c = part_learning_loss(&mut tape, rec, half, 0.0).unwrap();
        assert_eq!(tape.scalar(c), 0.123);
    }
}
