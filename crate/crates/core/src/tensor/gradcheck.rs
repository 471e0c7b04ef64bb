//! Finite-difference gradient checking harness.
//!
//! The tape's analytic backward is compared against central differences
//! of a scalar projection s = sum(w ⊙ f(inputs)) with fixed random w.
//! The harness only reads tape values, so it stays independent of the
//! backward implementation it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, TensorId};

/// Max relative error between analytic and central-difference gradients,
/// over every element of every input. `h` is the central step.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> f64
where
    F: FnMut(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    grad_check_seeded(f, inputs, h, 0x5eed)
}

/// Like [`grad_check`] with an explicit seed for the projection weights.
pub fn grad_check_seeded<F>(mut f: F, inputs: &[Tensor<f64>], h: f64, seed: u64) -> f64
where
    F: FnMut(&mut Tape<f64>, &[TensorId]) -> TensorId,
{
    let run = |f: &mut F, inputs: &[Tensor<f64>]| -> (Tape<f64>, Vec<TensorId>, TensorId) {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &ids);
        (tape, ids, out)
    };

    let (tape, ids, out) = run(&mut f, inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(
        tape.value(out).shape(),
        (0..tape.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    );
    let mut grads = tape.backward(out, &w).expect("backward failed in grad_check");
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.take(id)).collect();

    let project = |f: &mut F, inputs: &[Tensor<f64>]| -> f64 {
        let (tape, _, out) = run(f, inputs);
        tape.value(out).data().iter().zip(w.data()).map(|(&y, &wi)| y * wi).sum()
    };

    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let sp = project(&mut f, &work);
            work[ti].data_mut()[ei] = orig - h;
            let sm = project(&mut f, &work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (sp - sm) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    max_err
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

    fn randt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn matmul_all_transpose_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a = randt(if ta { &[4, 3] } else { &[3, 4] }, &mut rng);
            let b = randt(if tb { &[5, 4] } else { &[4, 5] }, &mut rng);
            let err = grad_check(
                |tape, ids| tape.matmul_t(ids[0], ids[1], ta, tb).unwrap(),
                &[a, b],
                1e-4,
            );
            assert!(err <= 1e-6, "matmul ta={ta} tb={tb}: err {err}");
        }
    }

    #[test]
    fn linear_layer_random_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randt(&[8, 8], &mut rng);
        let w = randt(&[8, 8], &mut rng);
        let b = randt(&[8], &mut rng);
        let err = grad_check(|tape, ids| tape.linear(ids[0], ids[1], ids[2]).unwrap(), &[x, w, b], 1e-4);
        assert!(err <= 1e-6, "linear: err {err}");
    }

    #[test]
    fn layer_norm_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randt(&[5, 7], &mut rng);
        let g = randt(&[7], &mut rng);
        let b = randt(&[7], &mut rng);
        let err = grad_check(|tape, ids| tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap(), &[x, g, b], 1e-4);
        assert!(err <= 1e-5, "layer_norm: err {err}");
    }

    #[test]
    fn softmax_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randt(&[6, 5], &mut rng);
        let err = grad_check(|tape, ids| tape.softmax(ids[0]).unwrap(), &[x], 1e-4);
        assert!(err <= 1e-5, "softmax: err {err}");
    }

    #[test]
    fn gelu_backward_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // keep inputs at interior points, margin away from 0
        let x = Tensor::new(
            &[4, 4],
            (0..16)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.1..2.0);
                    if rng.gen_bool(0.5) { v } else { -v }
                })
                .collect(),
        );
        let err = grad_check(|tape, ids| tape.gelu(ids[0]), &[x], 1e-4);
        assert!(err <= 1e-5, "gelu: err {err}");
    }

    #[test]
    fn elementwise_broadcast_and_shuffle_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randt(&[3, 4], &mut rng);
        let y = randt(&[3, 4], &mut rng);
        let v = randt(&[4], &mut rng);
        let err = grad_check(
            |tape, ids| {
                let m = tape.mul(ids[0], ids[1]).unwrap();
                let a = tape.add(m, ids[0]).unwrap();
                let s = tape.scale(a, 0.7);
                let c = tape.add_const(s, 0.3);
                let r = tape.mul_row(c, ids[2]).unwrap();
                let r = tape.add_row(r, ids[2]).unwrap();
                // transpose then concat with itself
                let idx: Vec<usize> = (0..12).map(|o| (o % 3) * 4 + o / 3).collect();
                let t = tape.reorder(r, Rc::new(idx), &[4, 3]).unwrap();
                tape.concat_cols(&[t, t]).unwrap()
            },
            &[x, y, v],
            1e-4,
        );
        assert!(err <= 1e-5, "composite: err {err}");
    }

    #[test]
    fn zero_gradient_function_is_exactly_zero() {
        let x = Tensor::new(&[2, 2], vec![0.3, -0.4, 0.7, 0.1]);
        let err = grad_check(
            |tape, ids| {
                let z = tape.scale(ids[0], 0.0);
                tape.mul(z, z).unwrap()
            },
            &[x],
            1e-4,
        );
        assert_eq!(err, 0.0);
    }

    #[test]
    fn mini_attention_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randt(&[4, 6], &mut rng);
        let wq = randt(&[6, 6], &mut rng);
        let wk = randt(&[6, 6], &mut rng);
        let wv = randt(&[6, 6], &mut rng);
        let err = grad_check(
            |tape, ids| {
                let q = tape.matmul_t(ids[0], ids[1], false, true).unwrap();
                let k = tape.matmul_t(ids[0], ids[2], false, true).unwrap();
                let v = tape.matmul_t(ids[0], ids[3], false, true).unwrap();
                let scores = tape.matmul_t(q, k, false, true).unwrap();
                let scaled = tape.scale(scores, 1.0 / (6.0f64).sqrt());
                let attn = tape.softmax(scaled).unwrap();
                tape.matmul(attn, v).unwrap()
            },
            &[x, wq, wk, wv],
            1e-4,
        );
        assert!(err <= 1e-5, "attention: err {err}");
    }
}
