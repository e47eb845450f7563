mod common;

use common::{finite_difference_check, naive_conv, random_tensor, rng};
use rand::Rng;
use sintermon::tensor::{frobenius_distance, Adam, AdamConfig, BatchNormState, Mode, ParamStore, Tape, Tensor};
use sintermon::Error;

fn conv_once(x: Tensor, k: Tensor, b: Tensor) -> Tensor {
    let mut store = ParamStore::<f32>::new();
    let (kid, bid) = (store.add("k", k), store.add("b", b));
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let kv = tape.param(&store, kid);
    let bv = tape.param(&store, bid);
    let y = tape.conv2d(xv, kv, bv).unwrap();
    tape.value(y).clone()
}

#[test]
fn conv_zero_input_yields_bias() {
    let mut r = rng(1);
    let y = conv_once(
        Tensor::zeros(&[1, 2, 5, 5]),
        random_tensor(&[3, 2, 3, 3], &mut r),
        Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap(),
    );
    assert_eq!(y.shape(), &[1, 3, 5, 5]);
    for (c, plane) in y.data().chunks(25).enumerate() {
        assert!(plane.iter().all(|&v| v == [0.5, -1.0, 2.0][c]));
    }
}

#[test]
fn conv_identity_kernel() {
    let mut r = rng(2);
    let x = random_tensor(&[1, 1, 6, 4], &mut r);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let y = conv_once(x.clone(), k, Tensor::zeros(&[1]));
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut r = rng(3);
    for _ in 0..5 {
        let x = random_tensor(&[1, 1, 5, 5], &mut r);
        let k = random_tensor(&[2, 1, 3, 3], &mut r);
        let b = random_tensor(&[2], &mut r);
        let expected = naive_conv(&x, &k, &b);
        let y = conv_once(x, k, b);
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }
    // multi-channel, batched
    let x = random_tensor(&[2, 3, 8, 6], &mut r);
    let k = random_tensor(&[4, 3, 3, 3], &mut r);
    let b = random_tensor(&[4], &mut r);
    let expected = naive_conv(&x, &k, &b);
    let y = conv_once(x, k, b);
    for (a, e) in y.data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-5);
    }
}

#[test]
fn conv_shape_errors_name_dimensions() {
    let mut store = ParamStore::<f32>::new();
    let kid = store.add("k", Tensor::zeros(&[2, 3, 3, 3]));
    let bid = store.add("b", Tensor::zeros(&[2]));
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let (k, b) = (tape.param(&store, kid), tape.param(&store, bid));
    let err = tape.conv2d(x, k, b).unwrap_err();
    assert!(matches!(&err, Error::Shape(m) if m.contains("2 channels") && m.contains("expect 3")), "{err}");

    let k5 = tape.constant(Tensor::zeros(&[2, 2, 5, 5]));
    assert!(tape.conv2d(x, k5, b).is_err());
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut r = rng(4);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", random_tensor(&[2, 2, 4, 4], &mut r));
    let k = store.add("k", random_tensor(&[3, 2, 3, 3], &mut r));
    let b = store.add("b", random_tensor(&[3], &mut r));
    let target = random_tensor(&[2, 3, 4, 4], &mut r);
    let rep = finite_difference_check(&mut store, &[x, k, b], None, 1e-3, 1e-2, 1e-4, |t, s| {
        let (xv, kv, bv) = (t.param(s, x), t.param(s, k), t.param(s, b));
        let y = t.conv2d(xv, kv, bv).unwrap();
        t.sq_error(y, &target).unwrap()
    });
    assert!(rep.checked > 100);
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
}

fn naive_pool(x: &Tensor) -> Vec<f32> {
    let &[n, c, h, w] = x.shape() else { panic!() };
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..h / 2 {
            for ox in 0..w / 2 {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[p * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

#[test]
fn maxpool_examples_and_oracle() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 3.5));
    let y = tape.maxpool2d(c).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 3.5));

    let small = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = tape.maxpool2d(small).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0]);

    let mut r = rng(5);
    let x = random_tensor(&[1, 3, 8, 8], &mut r);
    let expected = naive_pool(&x);
    let xv = tape.constant(x);
    let y = tape.maxpool2d(xv).unwrap();
    assert_eq!(tape.value(y).data(), expected.as_slice());

    let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
    assert!(matches!(tape.maxpool2d(odd), Err(Error::Shape(_))));
}

#[test]
fn maxpool_routes_gradient_to_first_maximum_on_ties() {
    let mut store = ParamStore::<f32>::new();
    let x = store.add("x", Tensor::new(vec![1, 1, 2, 2], vec![7.0, 7.0, 7.0, 1.0]).unwrap());
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let y = tape.maxpool2d(xv).unwrap();
    let loss = tape.sq_error(y, &Tensor::new(vec![1, 1, 1, 1], vec![0.0]).unwrap()).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(x).grad, vec![14.0, 0.0, 0.0, 0.0]);
}

#[test]
fn upsample_replicates_and_round_trips_constants() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap());
    let y = tape.upsample2d(x).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[5.0; 4]);

    let c = tape.constant(Tensor::full(&[2, 3, 8, 8], -1.25));
    let p = tape.maxpool2d(c).unwrap();
    let u = tape.upsample2d(p).unwrap();
    assert_eq!(tape.value(u), tape.value(c));
}

#[test]
fn upsample_gradient_matches_finite_differences() {
    let mut r = rng(6);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", random_tensor(&[1, 2, 3, 3], &mut r));
    let target = random_tensor(&[1, 2, 6, 6], &mut r);
    let rep = finite_difference_check(&mut store, &[x], None, 1e-3, 1e-3, 1e-4, |t, s| {
        let xv = t.param(s, x);
        let y = t.upsample2d(xv).unwrap();
        t.sq_error(y, &target).unwrap()
    });
    assert_eq!(rep.checked, 18);
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
}

#[test]
fn dense_identity_zero_input_and_gradients() {
    let mut r = rng(7);
    let mut store = ParamStore::<f32>::new();
    let eye = store.add("eye", Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let zero_b = store.add("zb", Tensor::zeros(&[3]));
    let input = random_tensor(&[2, 3], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(input.clone());
    let (w, b) = (tape.param(&store, eye), tape.param(&store, zero_b));
    let y = tape.dense(xv, w, b).unwrap();
    assert_eq!(tape.value(y), &input);

    let bias = random_tensor(&[3], &mut r);
    let bid = store.add("b", bias.clone());
    let w = tape.param(&store, eye);
    let bv = tape.param(&store, bid);
    let z = tape.constant(Tensor::zeros(&[1, 3]));
    let y = tape.dense(z, w, bv).unwrap();
    assert_eq!(tape.value(y).data(), bias.data());

    let bad = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(tape.dense(bad, w, bv).is_err());

    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", random_tensor(&[2, 4], &mut r));
    let w = store.add("w", random_tensor(&[3, 4], &mut r));
    let b = store.add("b", random_tensor(&[3], &mut r));
    let target = random_tensor(&[2, 3], &mut r);
    let rep = finite_difference_check(&mut store, &[x, w, b], None, 1e-3, 1e-2, 1e-4, |t, s| {
        let (xv, wv, bv) = (t.param(s, x), t.param(s, w), t.param(s, b));
        let y = t.dense(xv, wv, bv).unwrap();
        t.sq_error(y, &target).unwrap()
    });
    assert_eq!(rep.checked, 8 + 12 + 3);
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
}

#[test]
fn batchnorm_train_normalizes_per_channel() {
    let mut r = rng(8);
    let mut store = ParamStore::<f32>::new();
    let g = store.add("g", Tensor::full(&[3], 1.0));
    let b = store.add("b", Tensor::zeros(&[3]));
    // channels with distinct offsets and spreads
    let x = Tensor::from_fn(&[4, 3, 4, 4], |i| {
        let c = (i / 16) % 3;
        10.0 * c as f32 + 2.0 * (c as f32 + 1.0) * r.gen_range(-1.0f32..1.0)
    });
    let mut state = BatchNormState::new(3);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let (gv, bv) = (tape.param(&store, g), tape.param(&store, b));
    let y = tape.batchnorm(xv, gv, bv, &mut state, Mode::Train).unwrap();
    let out = tape.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| out.data()[(n * 3 + c) * 16..][..16].iter().map(|&v| v as f64))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
    }
    assert!(state.initialized);
}

#[test]
fn batchnorm_infer_identity_and_uninitialized_error() {
    let mut r = rng(9);
    let mut store = ParamStore::<f32>::new();
    let g = store.add("g", Tensor::full(&[2], 1.0));
    let b = store.add("b", Tensor::zeros(&[2]));
    let x = random_tensor::<f32>(&[3, 2, 2, 2], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (gv, bv) = (tape.param(&store, g), tape.param(&store, b));
    let fresh = BatchNormState::new(2);
    assert!(tape.batchnorm_infer(xv, gv, bv, &fresh).is_err());

    let state = BatchNormState::with_stats(vec![0.0; 2], vec![1.0; 2]).unwrap();
    let y = tape.batchnorm_infer(xv, gv, bv, &state).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert!((a - e).abs() < 1e-5 * e.abs().max(1.0));
    }
}

#[test]
fn batchnorm_running_state_uses_momentum() {
    let mut store = ParamStore::<f32>::new();
    let g = store.add("g", Tensor::full(&[1], 1.0));
    let b = store.add("b", Tensor::zeros(&[1]));
    let mut state = BatchNormState::new(1);
    for (batch, expected_mean) in [([1.0f32, 3.0], 2.0f32), ([5.0, 7.0], 0.9 * 2.0 + 0.1 * 6.0)] {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![2, 1], batch.to_vec()).unwrap());
        let (gv, bv) = (tape.param(&store, g), tape.param(&store, b));
        tape.batchnorm_train(xv, gv, bv, &mut state).unwrap();
        assert!((state.mean[0] - expected_mean).abs() < 1e-6);
    }
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    let mut r = rng(10);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", random_tensor(&[3, 2, 2, 2], &mut r));
    let g = store.add("g", random_tensor(&[2], &mut r));
    let b = store.add("b", random_tensor(&[2], &mut r));
    let target = random_tensor(&[3, 2, 2, 2], &mut r);
    let rep = finite_difference_check(&mut store, &[g, b, x], None, 1e-3, 1e-2, 1e-4, |t, s| {
        let mut state = BatchNormState::new(2);
        let (xv, gv, bv) = (t.param(s, x), t.param(s, g), t.param(s, b));
        let y = t.batchnorm_train(xv, gv, bv, &mut state).unwrap();
        t.sq_error(y, &target).unwrap()
    });
    assert!(rep.checked >= 4);
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
}

#[test]
fn dropout_modes_and_rate_validation() {
    let mut r = rng(11);
    let x = random_tensor::<f32>(&[1, 1000], &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    for mode in [Mode::Train, Mode::Infer] {
        let y = tape.dropout(xv, 0.0, mode, &mut r).unwrap();
        assert_eq!(tape.value(y), &x);
    }
    let y = tape.dropout(xv, 0.7, Mode::Infer, &mut r).unwrap();
    assert_eq!(tape.value(y), &x);
    assert!(tape.dropout(xv, 1.0, Mode::Train, &mut r).is_err());
    assert!(tape.dropout(xv, -0.1, Mode::Train, &mut r).is_err());
}

#[test]
fn dropout_survivor_fraction_concentrates() {
    let mut r = rng(12);
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::full(&[1, 100_000], 1.0));
    let y = tape.dropout(xv, 0.5, Mode::Train, &mut r).unwrap();
    let out = tape.value(y).data();
    let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / out.len() as f64;
    assert!((0.49..=0.51).contains(&survivors), "{survivors}");
    assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_masks_are_seed_deterministic() {
    let run = |seed| {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::full(&[1, 256], 1.0));
        let y = tape.dropout(xv, 0.3, Mode::Train, &mut r).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(42), run(42));
    assert_ne!(run(42), run(43));
}

#[test]
fn relu_and_error_norms() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let m = Tensor::new(vec![2, 2], vec![0.3, -1.0, 4.0, 2.5]).unwrap();
    assert_eq!(frobenius_distance(m.data(), m.data()), 0.0);
    let eye = [1.0f32, 0.0, 0.0, 1.0];
    assert!((frobenius_distance(&eye, &[0.0; 4]) - 2f64.sqrt()).abs() < 1e-12);

    let p = tape.constant(Tensor::new(vec![2, 2], eye.to_vec()).unwrap());
    let l = tape.sq_error(p, &Tensor::zeros(&[2, 2])).unwrap();
    assert_eq!(tape.value(l).data(), &[2.0]);
}

#[test]
fn backward_contracts() {
    let mut r = rng(13);
    let mut store = ParamStore::<f32>::new();
    let used = store.add("used", random_tensor(&[2, 3], &mut r));
    let unused = store.add("unused", random_tensor(&[4], &mut r));
    let mut tape = Tape::new();
    let x = tape.constant(random_tensor(&[1, 3], &mut r));
    let w = tape.param(&store, used);
    let b = tape.constant(Tensor::zeros(&[2]));
    let _ = tape.param(&store, unused);
    let y = tape.dense(x, w, b).unwrap();
    let loss = tape.sq_error(y, &Tensor::zeros(&[1, 2])).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert!(store.get(unused).grad.iter().all(|&g| g == 0.0));
    assert!(store.get(used).grad.iter().any(|&g| g != 0.0));
    assert!(tape.is_empty());
    assert!(matches!(tape.backward(loss, &mut store), Err(Error::Tape(_))));

    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.backward(x, &mut store), Err(Error::Shape(_))));
}

#[test]
fn two_layer_network_gradients_match_finite_differences() {
    let mut r = rng(14);
    let mut store = ParamStore::<f32>::new();
    let w1 = store.add("w1", random_tensor(&[8, 5], &mut r));
    let b1 = store.add("b1", random_tensor(&[8], &mut r));
    let w2 = store.add("w2", random_tensor(&[3, 8], &mut r));
    let b2 = store.add("b2", random_tensor(&[3], &mut r));
    let input = random_tensor(&[4, 5], &mut r);
    let target = random_tensor(&[4, 3], &mut r);
    let rep = finite_difference_check(&mut store, &[w1, b1, w2, b2], None, 1e-3, 1e-2, 1e-4, |t, s| {
        let x = t.constant(input.clone());
        let (a, b) = (t.param(s, w1), t.param(s, b1));
        let h = t.dense(x, a, b).unwrap();
        let h = t.relu(h).unwrap();
        let (a, b) = (t.param(s, w2), t.param(s, b2));
        let y = t.dense(h, a, b).unwrap();
        t.sq_error(y, &target).unwrap()
    });
    assert!(rep.checked > 40);
    assert!(rep.failures.is_empty(), "{:#?}", rep.failures);
}

#[test]
fn adam_fits_small_regression_through_tape() {
    let mut r = rng(15);
    let mut store = ParamStore::<f32>::new();
    let w = store.add("w", random_tensor(&[1, 2], &mut r));
    let b = store.add("b", Tensor::zeros(&[1]));
    let input = random_tensor(&[16, 2], &mut r);
    let target = Tensor::from_fn(&[16, 1], |i| 2.0 * input.data()[2 * i] - input.data()[2 * i + 1] + 0.5);
    let mut adam = Adam::new(AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    });
    let mut first = None;
    let mut last = 0.0;
    for _ in 0..300 {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (wv, bv) = (tape.param(&store, w), tape.param(&store, b));
        let y = tape.dense(x, wv, bv).unwrap();
        let loss = tape.sq_error(y, &target).unwrap();
        last = tape.value(loss).data()[0];
        first.get_or_insert(last);
        tape.backward(loss, &mut store).unwrap();
        adam.step(&mut store);
    }
    assert!(last < 1e-3 * first.unwrap());
}
