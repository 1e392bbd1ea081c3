//! Dense `f64` tensors, a reverse-mode tape, and a reproducible RNG.

pub mod gradcheck;
mod rng;
mod tape;
mod tensor;

pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::mean_std;

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialization.
pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::from_vec(shape, data).expect("non-empty shape").with_grad()
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_gradients;
    use super::*;
    use crate::error::{Error, Result};

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn tg(shape: &[usize], data: &[f64]) -> Tensor {
        t(shape, data).with_grad()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap().with_grad()
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(matches!(Tensor::from_vec(&[2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.leaf(&t(&[2, 1], &[3.0, 4.0]));
        let y = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(y), &[3.0, 4.0]);

        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 1], &[5.0, 6.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_scalar_chain_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(&tg(&[1, 1], &[2.0]));
        let b = tape.leaf(&tg(&[1, 1], &[3.0]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &[6.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        close(tape.value(y), &[1.0 / 3.0; 3], 1e-15);

        let x = tape.leaf(&t(&[2], &[1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.leaf(&t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        close(tape.value(y), &[0.25, 0.75], 1e-15);

        assert!(matches!(tape.softmax(x, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_axis0_of_matrix() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = tape.softmax(x, 0).unwrap();
        close(tape.value(y), &[0.5; 4], 1e-15);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.leaf(&t(&[1], &[0.0]));
        let s = tape.sigmoid(z);
        let th = tape.tanh(z);
        assert_eq!(tape.value(s), &[0.5]);
        assert_eq!(tape.value(th), &[0.0]);
        let a = tape.leaf(&t(&[2], &[2.0, 3.0]));
        let b = tape.leaf(&t(&[2], &[4.0, 5.0]));
        let h = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(h), &[8.0, 15.0]);
        let c = tape.leaf(&t(&[3], &[1.0, 1.0, 1.0]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape(_))));
        let m = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.leaf(&t(&[2], &[10.0, 20.0]));
        let by_channel = tape.add_channel(m, v).unwrap();
        assert_eq!(tape.value(by_channel), &[11.0, 12.0, 23.0, 24.0]);
        let by_row = tape.add_row(m, v).unwrap();
        assert_eq!(tape.value(by_row), &[11.0, 22.0, 13.0, 24.0]);
        assert!(tape.add_channel(m, c).is_err());
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);

        // one-hot centre, all-ones 3x3: sliding-window oracle
        let mut onehot = vec![0.0; 9];
        onehot[4] = 1.0;
        let x = tape.leaf(&t(&[1, 3, 3], &onehot));
        let w = tape.leaf(&t(&[1, 1, 3, 3], &[1.0; 9]));
        let y = tape.conv2d(x, w).unwrap();
        let mut expected = vec![0.0; 9];
        for oy in 0..3i32 {
            for ox in 0..3i32 {
                for ky in -1..=1i32 {
                    for kx in -1..=1i32 {
                        let (sy, sx) = (oy + ky, ox + kx);
                        if (0..3).contains(&sy) && (0..3).contains(&sx) {
                            expected[(oy * 3 + ox) as usize] += onehot[(sy * 3 + sx) as usize];
                        }
                    }
                }
            }
        }
        assert_eq!(tape.value(y), expected.as_slice());
        assert!(tape.value(y).iter().all(|&v| v == 1.0));

        // constant propagation at an interior pixel
        let x = tape.leaf(&Tensor::filled(&[1, 5, 5], 2.0));
        let w = tape.leaf(&t(&[1, 1, 3, 3], &[0.5, -1.0, 0.25, 1.0, 2.0, 0.0, -0.5, 0.75, 1.0]));
        let y = tape.conv2d(x, w).unwrap();
        assert!((tape.value(y)[12] - 2.0 * 4.0).abs() < 1e-12);

        let w = tape.leaf(&Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(tape.conv2d(x, w), Err(Error::Config(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tg(&[3], &[1.0, -2.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        // mse(x, 0) with one element
        let mut tape = Tape::new();
        let x = tape.leaf(&tg(&[1], &[2.0]));
        let sq = tape.square(x).unwrap();
        let loss = tape.mean(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tg(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 3.0);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, 6.0]);
        assert_eq!(tape.grad(y).unwrap(), &[2.0, 2.0]);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut tape = Tape::new();
        let frozen = tape.leaf(&t(&[2], &[1.0, 2.0]));
        let live = tape.leaf(&tg(&[2], &[3.0, 4.0]));
        let p = tape.mul(frozen, live).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(live).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn identity_matmul_is_exact() {
        let mut rng = Rng::new(4);
        let x: Vec<f64> = (0..12).map(|_| (rng.below(1000) as f64 - 500.0) / 8.0).collect();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let mut tape = Tape::new();
        let i = tape.leaf(&t(&[4, 4], &eye));
        let xv = tape.leaf(&t(&[4, 3], &x));
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), x.as_slice());
    }

    /// Weighted sum so that every output element has a distinct cotangent.
    fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
        let n = tape.value(y).len();
        let mut rng = Rng::new(seed);
        let w = tape.constant(tape.shape(y).to_vec().as_slice(), (0..n).map(|_| rng.normal()).collect())?;
        let p = tape.mul(y, w)?;
        Ok(tape.sum(p))
    }

    type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

    fn op_cases(rng: &mut Rng) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
        let s = rng.next_u64();
        vec![
            ("matmul", vec![random(&[3, 4], rng), random(&[4, 2], rng)], Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, s)
            })),
            ("transpose", vec![random(&[3, 2], rng)], Box::new(move |t, v| {
                let y = t.transpose(v[0])?;
                project(t, y, s)
            })),
            ("add_sub_mul", vec![random(&[2, 3], rng), random(&[2, 3], rng)], Box::new(move |t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[1])?;
                let c = t.mul(b, v[1])?;
                let c = t.scale(c, 0.7);
                project(t, c, s)
            })),
            ("tanh_sigmoid_gelu", vec![random(&[5], rng)], Box::new(move |t, v| {
                let a = t.tanh(v[0]);
                let b = t.sigmoid(v[0]);
                let c = t.gelu(v[0]);
                let ab = t.add(a, b)?;
                let y = t.add(ab, c)?;
                project(t, y, s)
            })),
            ("channel_broadcast", vec![random(&[3, 2, 2], rng), random(&[3], rng), random(&[3], rng)], Box::new(move |t, v| {
                let a = t.mul_channel(v[0], v[1])?;
                let y = t.add_channel(a, v[2])?;
                project(t, y, s)
            })),
            ("row_broadcast", vec![random(&[4, 3], rng), random(&[3], rng), random(&[3], rng)], Box::new(move |t, v| {
                let a = t.mul_row(v[0], v[1])?;
                let y = t.add_row(a, v[2])?;
                project(t, y, s)
            })),
            ("softmax", vec![random(&[3, 4], rng)], Box::new(move |t, v| {
                let a = t.softmax(v[0], 1)?;
                let b = t.softmax(v[0], 0)?;
                let y = t.add(a, b)?;
                project(t, y, s)
            })),
            ("sum_mean", vec![random(&[2, 3], rng)], Box::new(move |t, v| {
                let sq = t.square(v[0])?;
                let a = t.sum(sq);
                let b = t.mean(v[0]);
                t.add(a, b)
            })),
            ("conv2d", vec![random(&[2, 4, 5], rng), random(&[3, 2, 3, 3], rng)], Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1])?;
                project(t, y, s)
            })),
            ("box_blur", vec![random(&[2, 12], rng)], Box::new(move |t, v| {
                let y = t.box_blur(v[0], 3, 4, 3)?;
                project(t, y, s)
            })),
            ("upsample", vec![random(&[2, 2, 3], rng)], Box::new(move |t, v| {
                let y = t.upsample_nearest(v[0], 2)?;
                project(t, y, s)
            })),
            ("instance_norm", vec![random(&[3, 2, 3], rng)], Box::new(move |t, v| {
                let y = t.instance_norm(v[0], 1e-5)?;
                project(t, y, s)
            })),
            ("layer_norm", vec![random(&[3, 5], rng)], Box::new(move |t, v| {
                let y = t.layer_norm(v[0], 1e-6)?;
                project(t, y, s)
            })),
            ("normalize_rows", vec![random(&[3, 4], rng)], Box::new(move |t, v| {
                let y = t.normalize_rows(v[0], 1e-12)?;
                project(t, y, s)
            })),
            ("layout", vec![random(&[3, 4], rng), random(&[2, 2], rng)], Box::new(move |t, v| {
                let a = t.slice_cols(v[0], 1, 2)?;
                let b = t.gather_rows(&[(a, 2), (v[1], 0), (a, 0), (a, 2)])?;
                let c = t.concat_cols(&[b, b])?;
                let r = t.reshape(c, &[2, 8])?;
                project(t, r, s)
            })),
        ]
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::new(seed);
            for (name, inputs, build) in op_cases(&mut rng) {
                let report = check_gradients(&*build, &inputs, 1e-5, None).unwrap();
                assert!(report.passes(1e-6), "{name} seed {seed}: {report:?}");
            }
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let run = || {
            let mut rng = Rng::new(99);
            let a = random(&[4, 4], &mut rng);
            let mut tape = Tape::new();
            let x = tape.leaf(&a);
            let y = tape.softmax(x, 1).unwrap();
            let z = tape.matmul(y, x).unwrap();
            tape.value(z).to_vec()
        };
        assert_eq!(run(), run());
    }
}
