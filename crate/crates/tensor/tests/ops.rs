use flowct_tensor::{
    attention_block, AttentionWeights, DropoutKey, Tape, Tensor, TensorError, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Plain nested-loop cross-correlation for a single batch item and channel pair.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, pad: usize) -> Vec<f64> {
    let (d, h, wd) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    let k = w.shape()[2];
    let mut out = vec![0.0; d * h * wd];
    for z in 0..d {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iz, iy, ix) = (
                                z as isize + kz as isize - pad as isize,
                                y as isize + ky as isize - pad as isize,
                                xx as isize + kx as isize - pad as isize,
                            );
                            if iz < 0
                                || iy < 0
                                || ix < 0
                                || iz >= d as isize
                                || iy >= h as isize
                                || ix >= wd as isize
                            {
                                continue;
                            }
                            let xi = ((iz as usize) * h + iy as usize) * wd + ix as usize;
                            acc += x.data()[xi] * w.data()[(kz * k + ky) * k + kx];
                        }
                    }
                }
                out[(z * h + y) * wd + xx] = acc;
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv3d(xv, wv, stride, pad).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv3d_scalar_product() {
    let x = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![2.0]).unwrap();
    let w = Tensor::from_vec(vec![1, 1, 1, 1, 1], vec![3.0]).unwrap();
    assert_eq!(conv(&x, &w, 1, 0).data(), &[6.0]);
}

#[test]
fn conv3d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[2, 1, 5, 4, 3]);
    for k in [1usize, 3, 5] {
        let mut w = Tensor::zeros(&[1, 1, k, k, k]);
        let c = k / 2;
        w.data_mut()[(c * k + c) * k + c] = 1.0;
        assert_eq!(conv(&x, &w, 1, k / 2), x, "kernel side {k}");
    }
}

#[test]
fn conv3d_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[1, 1, 4, 4, 4]);
    let w = random(&mut rng, &[1, 1, 3, 3, 3]);
    let y = conv(&x, &w, 1, 1);
    let expected = naive_conv(&x, &w, 1);
    for (a, b) in y.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn conv3d_output_extents_and_errors() {
    let x = Tensor::<f64>::zeros(&[1, 2, 16, 15, 9]);
    let w = Tensor::<f64>::zeros(&[4, 2, 3, 3, 3]);
    assert_eq!(conv(&x, &w, 2, 1).shape(), &[1, 4, 8, 8, 5]);
    assert_eq!(conv(&x, &w, 1, 0).shape(), &[1, 4, 14, 13, 7]);

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let bad = tape.constant(Tensor::<f64>::zeros(&[4, 3, 3, 3, 3]));
    match tape.conv3d(xv, bad, 1, 1) {
        Err(TensorError::AxisMismatch {
            axis,
            expected,
            found,
            ..
        }) => {
            assert_eq!((axis, expected, found), (1, 3, 2));
        }
        other => panic!("expected axis mismatch, got {other:?}"),
    }
    let even = tape.constant(Tensor::<f64>::zeros(&[4, 2, 2, 2, 2]));
    assert!(matches!(
        tape.conv3d(xv, even, 1, 1),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn backward_linear_and_stationary() {
    let x = Tensor::from_vec(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::from_vec(vec![4], vec![0.3, 0.1, -0.7, 2.0]).unwrap());
    let xv = tape.constant(x.clone());
    let wx = tape.mul(w, xv).unwrap();
    let loss = tape.sum(wx).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &x);
    assert!(tape.grad(xv).is_none());

    let target = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut tape = Tape::<f64>::new();
    let w = tape.param(target.clone());
    let t = tape.constant(target);
    let d = tape.sub(w, t).unwrap();
    let sq = tape.square(d).unwrap();
    let loss = tape.mean(sq).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(w).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_errors() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::zeros(&[3]));
    assert_eq!(tape.backward(w), Err(TensorError::NonScalarLoss(vec![3])));
    let loss = tape.sum(w).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.backward(loss), Err(TensorError::TapeConsumed));
}

#[test]
fn relu_definition() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::from_vec(vec![2], vec![-1.5, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
}

#[test]
fn dropout_eval_is_identity_and_train_is_keyed() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[4, 1000]);
    let key = DropoutKey {
        seed: 1,
        op_id: 2,
        step: 3,
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.dropout(xv, 0.05, key, false).unwrap();
    assert_eq!(tape.value(y), &x);

    let a = tape.dropout(xv, 0.05, key, true).unwrap();
    let b = tape.dropout(xv, 0.05, key, true).unwrap();
    let c = tape
        .dropout(xv, 0.05, DropoutKey { step: 4, ..key }, true)
        .unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    assert_ne!(tape.value(a), tape.value(c));
    let dropped = tape.value(a).data().iter().filter(|&&v| v == 0.0).count();
    assert!((100..300).contains(&dropped), "dropped {dropped} of 4000");
    let survivor = tape
        .value(a)
        .data()
        .iter()
        .zip(x.data())
        .find(|(v, _)| **v != 0.0)
        .unwrap();
    assert!((survivor.0 - survivor.1 / 0.95).abs() < 1e-15);
}

#[test]
fn group_norm_two_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_vec(vec![1, 2, 1], vec![1.0, 3.0]).unwrap());
    let gamma = tape.constant(Tensor::full(&[2], 1.0));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let y = tape.group_norm(x, gamma, beta, 1, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    assert!(matches!(
        tape.group_norm(x, gamma, beta, 3, 1e-5),
        Err(TensorError::Config(_))
    ));
}

fn attention_setup(
    rng: &mut ChaCha8Rng,
    tape: &mut Tape<f64>,
    c: usize,
    zero_out: bool,
) -> AttentionWeights {
    let mut pair = |tape: &mut Tape<f64>, zero: bool| {
        let w = if zero {
            Tensor::zeros(&[c, c, 1, 1, 1])
        } else {
            random(rng, &[c, c, 1, 1, 1])
        };
        let b = if zero {
            Tensor::zeros(&[c])
        } else {
            random(rng, &[c])
        };
        (tape.param(w), tape.param(b))
    };
    AttentionWeights {
        norm: None,
        query: pair(tape, false),
        key: pair(tape, false),
        value: pair(tape, false),
        out: pair(tape, zero_out),
    }
}

fn pointwise(tape: &Tape<f64>, (w, b): (Var, Var), token: &[f64]) -> Vec<f64> {
    let c = token.len();
    let (w, b) = (tape.value(w).data(), tape.value(b).data());
    (0..c)
        .map(|o| b[o] + (0..c).map(|i| w[o * c + i] * token[i]).sum::<f64>())
        .collect()
}

#[test]
fn attention_single_token_and_zero_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut tape = Tape::new();
    let c = 4;
    let weights = attention_setup(&mut rng, &mut tape, c, false);
    let x = random(&mut rng, &[1, c, 1, 1, 1]);
    let xv = tape.constant(x.clone());
    let y = attention_block(&mut tape, xv, &weights, 1).unwrap();
    let v = pointwise(&tape, weights.value, x.data());
    let proj = pointwise(&tape, weights.out, &v);
    for i in 0..c {
        assert!((tape.value(y).data()[i] - (x.data()[i] + proj[i])).abs() < 1e-12);
    }

    let weights = attention_setup(&mut rng, &mut tape, c, true);
    let x = random(&mut rng, &[2, c, 2, 3, 1]);
    let xv = tape.constant(x.clone());
    let y = attention_block(&mut tape, xv, &weights, 2).unwrap();
    assert_eq!(tape.value(y), &x);
    assert!(matches!(
        attention_block(&mut tape, xv, &weights, 3),
        Err(TensorError::Config(_))
    ));
}

#[test]
fn attention_two_tokens_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut tape = Tape::new();
    let c = 4;
    let weights = attention_setup(&mut rng, &mut tape, c, false);
    let x = random(&mut rng, &[1, c, 1, 1, 2]);
    let xv = tape.constant(x.clone());
    let y = attention_block(&mut tape, xv, &weights, 1).unwrap();

    let token = |t: usize| (0..c).map(|ch| x.data()[ch * 2 + t]).collect::<Vec<_>>();
    let toks = [token(0), token(1)];
    let q: Vec<_> = toks
        .iter()
        .map(|t| pointwise(&tape, weights.query, t))
        .collect();
    let k: Vec<_> = toks
        .iter()
        .map(|t| pointwise(&tape, weights.key, t))
        .collect();
    let v: Vec<_> = toks
        .iter()
        .map(|t| pointwise(&tape, weights.value, t))
        .collect();
    for i in 0..2 {
        let s: Vec<f64> = (0..2)
            .map(|j| (0..c).map(|d| q[i][d] * k[j][d]).sum::<f64>() / (c as f64).sqrt())
            .collect();
        let m = s[0].max(s[1]);
        let e = [(s[0] - m).exp(), (s[1] - m).exp()];
        let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let mixed: Vec<f64> = (0..c).map(|d| a[0] * v[0][d] + a[1] * v[1][d]).collect();
        let out = pointwise(&tape, weights.out, &mixed);
        for ch in 0..c {
            let got = tape.value(y).data()[ch * 2 + i];
            assert!(
                (got - (toks[i][ch] + out[ch])).abs() < 1e-12,
                "token {i} channel {ch}"
            );
        }
    }
}

#[test]
fn attention_is_token_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut tape = Tape::new();
    let c = 4;
    let tokens = 8;
    let weights = attention_setup(&mut rng, &mut tape, c, false);
    let x = random(&mut rng, &[1, c, 2, 2, 2]);
    let perm = [3usize, 0, 7, 5, 1, 2, 6, 4];
    let permuted = Tensor::from_fn(&[1, c, 2, 2, 2], |i| {
        let (ch, t) = (i / tokens, i % tokens);
        x.data()[ch * tokens + perm[t]]
    });
    let xv = tape.constant(x);
    let pv = tape.constant(permuted);
    let y = attention_block(&mut tape, xv, &weights, 2).unwrap();
    let yp = attention_block(&mut tape, pv, &weights, 2).unwrap();
    for ch in 0..c {
        for t in 0..tokens {
            let a = tape.value(yp).data()[ch * tokens + t];
            let b = tape.value(y).data()[ch * tokens + perm[t]];
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random(&mut rng, &[2, 3, 6, 6, 6]).cast::<f32>();
    let w = random(&mut rng, &[5, 3, 3, 3, 3]).cast::<f32>();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.param(w.clone());
        let y = tape.conv3d(xv, wv, 1, 1).unwrap();
        let s = tape.square(y).unwrap();
        let l = tape.mean(s).unwrap();
        tape.backward(l).unwrap();
        (tape.value(y).clone(), tape.grad(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv3d_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, 2, 4, 5, 3]);
        let y = random(&mut rng, &[1, 2, 4, 5, 3]);
        let k = random(&mut rng, &[2, 2, 3, 3, 3]);
        let combo = x.scale(a).add_scaled(&y, b).unwrap();
        let lhs = conv(&combo, &k, 1, 1);
        let rhs = conv(&x, &k, 1, 1).scale(a).add_scaled(&conv(&y, &k, 1, 1), b).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }
}
