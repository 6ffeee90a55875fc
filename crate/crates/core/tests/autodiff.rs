mod common;

use common::{check, random, REL_TOL};
use megspike::rng::Rng;
use megspike::tensor::{BatchNormState, Mode, Tape, Tensor, Var};

fn t32(shape: Vec<usize>, v: Vec<f32>) -> Tensor<f32> {
    Tensor::new(shape, v).unwrap()
}

/// Projects `v` onto fixed pseudo-random weights so every output element
/// contributes a distinct coefficient to the scalar loss.
fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Var {
    let n = tape.value(v).len();
    let flat = tape.reshape(v, vec![1, n]).unwrap();
    let mut rng = Rng::new(4242);
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let w = tape.input(&Tensor::new(vec![1, n], w).unwrap());
    let y = tape.linear(flat, w, None).unwrap();
    tape.sum(y)
}

fn assert_grads(rep: common::GradReport) {
    assert!(rep.checked > 0);
    assert!(rep.enough_checked(), "too many kinked coordinates: {rep:?}");
    assert!(rep.max_rel_err <= REL_TOL, "{rep:?}");
}

// ---- conv_time ----

#[test]
fn conv_zero_input_gives_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::zeros(vec![2, 3, 6]));
    let w = tape.param(&Tensor::full(vec![4, 2, 1, 5], 0.3));
    let b = tape.param(&Tensor::zeros(vec![4]));
    let y = tape.conv_time(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[4, 3, 6]);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv_identity_kernel() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&t32(vec![1, 1, 6], vec![1., 2., 3., 4., 5., 6.]));
    let w = tape.param(&t32(vec![1, 1, 1, 5], vec![0., 0., 1., 0., 0.]));
    let b = tape.param(&Tensor::zeros(vec![1]));
    let y = tape.conv_time(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[1., 2., 3., 4., 5., 6.]);
}

#[test]
fn conv_box_kernel_zero_padded() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::full(vec![1, 1, 6], 1.0));
    let w = tape.param(&Tensor::full(vec![1, 1, 1, 5], 1.0));
    let b = tape.param(&Tensor::zeros(vec![1]));
    let y = tape.conv_time(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[3., 4., 5., 5., 4., 3.]);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::zeros(vec![2, 3, 6]));
    let w = tape.param(&Tensor::zeros(vec![4, 3, 1, 5]));
    let b = tape.param(&Tensor::zeros(vec![4]));
    assert!(tape.conv_time(x, w, b).is_err());
}

#[test]
fn conv_rows_do_not_mix() {
    let mut rng = Rng::new(1);
    let x0 = random(vec![1, 2, 4, 9], 1.0, &mut rng);
    let w = random(vec![3, 2, 1, 5], 1.0, &mut rng);
    let b = random(vec![3], 1.0, &mut rng);
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(x), tape.param(&w), tape.param(&b));
        let y = tape.conv_time(xv, wv, bv).unwrap();
        tape.value(y).to_vec()
    };
    let mut x1 = x0.clone();
    // perturb sensor row 2 of channel 1
    x1.values_mut()[36 + 2 * 9 + 4] += 0.5;
    let (y0, y1) = (run(&x0), run(&x1));
    for (i, (a, b)) in y0.iter().zip(&y1).enumerate() {
        let row = (i / 9) % 4;
        if row != 2 {
            assert_eq!(a.to_bits(), b.to_bits(), "row {row} changed");
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = Rng::new(2);
    let params = vec![
        random(vec![2, 2, 3, 7], 1.0, &mut rng),
        random(vec![3, 2, 1, 5], 1.0, &mut rng),
        random(vec![3], 1.0, &mut rng),
    ];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let y = tape.conv_time(vars[0], vars[1], vars[2]).unwrap();
            let l = weighted_sum(&mut tape, y);
            (tape, l, vars)
        },
        64,
        1,
    );
    assert_grads(rep);
}

// ---- batchnorm ----

#[test]
fn batchnorm_constant_input_gives_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::full(vec![4, 2, 3, 5], 2.5));
    let g = tape.param(&Tensor::full(vec![2], 1.0));
    let b = tape.param(&Tensor::zeros(vec![2]));
    let mut st = BatchNormState::new(2);
    let y = tape.batch_norm(x, g, b, &mut st, Mode::Train).unwrap();
    assert!(tape.value(y).iter().all(|v| v.abs() <= 1e-3));
}

#[test]
fn batchnorm_standardized_input_is_affine() {
    // per-channel batch mean 0, biased variance 1
    let vals = vec![1.0, -1.0, 1.0, -1.0];
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&Tensor::new(vec![4, 1, 1], vals.clone()).unwrap());
    let g = tape.param(&Tensor::full(vec![1], 2.0));
    let b = tape.param(&Tensor::full(vec![1], 1.0));
    let mut st = BatchNormState::new(1);
    let y = tape.batch_norm(x, g, b, &mut st, Mode::Train).unwrap();
    let eps_factor = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (o, i) in tape.value(y).iter().zip(&vals) {
        assert!((o - (2.0 * i * eps_factor + 1.0)).abs() < 1e-12);
    }
    // running stats moved toward (0, 4/3) with momentum 0.1
    assert!((st.running_mean[0] - 0.0).abs() < 1e-12);
    assert!((st.running_var[0] - (0.9 + 0.1 * 4.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn batchnorm_zero_gamma_gives_beta() {
    let mut rng = Rng::new(3);
    let x = random(vec![3, 2, 4], 5.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let xv = tape.input(&x);
    let g = tape.param(&Tensor::zeros(vec![2]));
    let b = tape.param(&Tensor::new(vec![2], vec![0.25, -0.75]).unwrap());
    let mut st = BatchNormState::new(2);
    let y = tape.batch_norm(xv, g, b, &mut st, Mode::Train).unwrap();
    for (i, v) in tape.value(y).iter().enumerate() {
        let c = (i / 4) % 2;
        assert_eq!(*v, [0.25, -0.75][c]);
    }
}

#[test]
fn batchnorm_eval_requires_running_stats() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::zeros(vec![1, 2, 3]));
    let g = tape.param(&Tensor::full(vec![2], 1.0));
    let b = tape.param(&Tensor::zeros(vec![2]));
    let mut st = BatchNormState::uninitialized();
    let err = tape.batch_norm(x, g, b, &mut st, Mode::Eval).unwrap_err();
    assert!(matches!(err, megspike::Error::InvalidState(_)));
}

#[test]
fn batchnorm_train_gradients() {
    let mut rng = Rng::new(4);
    let params = vec![
        random(vec![3, 2, 2, 4], 2.0, &mut rng),
        random(vec![2], 1.5, &mut rng),
        random(vec![2], 1.0, &mut rng),
    ];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let mut st = BatchNormState::new(2);
            let y = tape
                .batch_norm(vars[0], vars[1], vars[2], &mut st, Mode::Train)
                .unwrap();
            let l = weighted_sum(&mut tape, y);
            (tape, l, vars)
        },
        64,
        2,
    );
    assert_grads(rep);
}

#[test]
fn batchnorm_eval_gradients() {
    let mut rng = Rng::new(5);
    let params = vec![
        random(vec![2, 3, 5], 2.0, &mut rng),
        random(vec![3], 1.5, &mut rng),
        random(vec![3], 1.0, &mut rng),
    ];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let mut st = BatchNormState {
                running_mean: vec![0.1, -0.2, 0.3],
                running_var: vec![0.5, 1.5, 2.0],
            };
            let y = tape
                .batch_norm(vars[0], vars[1], vars[2], &mut st, Mode::Eval)
                .unwrap();
            let l = weighted_sum(&mut tape, y);
            (tape, l, vars)
        },
        64,
        3,
    );
    assert_grads(rep);
}

// ---- leaky relu ----

#[test]
fn leaky_relu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&Tensor::new(vec![3], vec![5.0, -1.0, 0.0]).unwrap());
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y), &[5.0, -0.01, 0.0]);
}

#[test]
fn leaky_relu_gradients() {
    let mut rng = Rng::new(6);
    let params = vec![random(vec![4, 8], 1.0, &mut rng)];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let y = tape.leaky_relu(vars[0], 0.01);
            let l = weighted_sum(&mut tape, y);
            (tape, l, vars)
        },
        64,
        4,
    );
    assert_grads(rep);
}

// ---- max pool ----

#[test]
fn maxpool_pairs() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&t32(vec![1, 4], vec![1., 3., 2., 5.]));
    let y = tape.max_pool_time(x).unwrap();
    assert_eq!(tape.value(y), &[3., 5.]);
}

#[test]
fn maxpool_lengths_30_15_7() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::full(vec![2, 3, 30], 1.5));
    let y = tape.max_pool_time(x).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 15]);
    let z = tape.max_pool_time(y).unwrap();
    assert_eq!(tape.shape(z), &[2, 3, 7]);
    assert!(tape.value(z).iter().all(|&v| v == 1.5));
}

#[test]
fn maxpool_rejects_short_rows() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::zeros(vec![2, 1]));
    assert!(tape.max_pool_time(x).is_err());
}

#[test]
fn maxpool_tie_routes_to_first() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(&Tensor::new(vec![1, 2], vec![2.0, 2.0]).unwrap().with_grad());
    let y = tape.max_pool_time(x).unwrap();
    let l = tape.sum(y);
    let g = tape.backward(l);
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0]);
}

#[test]
fn maxpool_gradients() {
    let mut rng = Rng::new(7);
    let params = vec![random(vec![2, 3, 9], 1.0, &mut rng)];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let y = tape.max_pool_time(vars[0]).unwrap();
            let l = weighted_sum(&mut tape, y);
            (tape, l, vars)
        },
        64,
        5,
    );
    assert_grads(rep);
}

// ---- linear ----

#[test]
fn linear_examples() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&t32(vec![1, 2], vec![1., 2.]));
    let w = tape.param(&t32(vec![1, 2], vec![1., 1.]));
    let b = tape.param(&t32(vec![1], vec![1.]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y), &[4.0]);

    let xi = tape.input(&t32(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
    let eye = tape.param(&t32(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
    let z = tape.param(&Tensor::zeros(vec![3]));
    let y = tape.linear(xi, eye, Some(z)).unwrap();
    assert_eq!(tape.value(y), &[1., 2., 3., 4., 5., 6.]);

    let x0 = tape.input(&Tensor::zeros(vec![2, 2]));
    let w2 = tape.param(&t32(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]));
    let b2 = tape.param(&t32(vec![3], vec![0.5, -1., 2.]));
    let y = tape.linear(x0, w2, Some(b2)).unwrap();
    assert_eq!(tape.value(y), &[0.5, -1., 2., 0.5, -1., 2.]);
}

#[test]
fn linear_rejects_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::zeros(vec![1, 3]));
    let w = tape.param(&Tensor::zeros(vec![2, 2]));
    assert!(tape.linear(x, w, None).is_err());
}

#[test]
fn linear_gradients() {
    let mut rng = Rng::new(8);
    let params = vec![
        random(vec![3, 5], 1.0, &mut rng),
        random(vec![4, 5], 1.0, &mut rng),
        random(vec![4], 1.0, &mut rng),
    ];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let y = tape.linear(vars[0], vars[1], Some(vars[2])).unwrap();
            let l = weighted_sum(&mut tape, y);
            (tape, l, vars)
        },
        64,
        6,
    );
    assert_grads(rep);
}

// ---- sigmoid ----

#[test]
fn sigmoid_values() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&t32(vec![3], vec![0.0, 40.0, 3f32.ln()]));
    let y = tape.sigmoid(x);
    let v = tape.value(y);
    assert_eq!(v[0], 0.5);
    assert_eq!(v[1], 1.0);
    assert!((v[2] - 0.75).abs() < 1e-6);
    let x = tape.input(&t32(vec![2], vec![-88.0, 88.0]));
    let y = tape.sigmoid(x);
    assert!(tape.value(y).iter().all(|v| v.is_finite()));
}

#[test]
fn sigmoid_gradients() {
    let mut rng = Rng::new(9);
    let params = vec![random(vec![12], 4.0, &mut rng)];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let y = tape.sigmoid(vars[0]);
            let l = weighted_sum(&mut tape, y);
            (tape, l, vars)
        },
        64,
        7,
    );
    assert_grads(rep);
}

// ---- dropout ----

#[test]
fn dropout_identity_cases() {
    let mut rng = Rng::new(10);
    let x = random(vec![50], 1.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let xv = tape.input(&x);
    let a = tape.dropout(xv, 0.0, Mode::Train, &mut rng).unwrap();
    let b = tape.dropout(xv, 0.3, Mode::Eval, &mut rng).unwrap();
    assert_eq!(tape.value(a), x.values());
    assert_eq!(tape.value(b), x.values());
    assert!(tape.dropout(xv, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = Rng::new(11);
    let mut tape = Tape::<f64>::new();
    let x = tape.input(&Tensor::full(vec![100_000], 1.0));
    let y = tape.dropout(x, 0.3, Mode::Train, &mut rng).unwrap();
    let mean = tape.value(y).iter().sum::<f64>() / 1e5;
    assert!((0.99..=1.01).contains(&mean), "mean {mean}");
}

#[test]
fn dropout_gradients() {
    let mut rng = Rng::new(12);
    let params = vec![random(vec![20], 1.0, &mut rng)];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let mut drng = Rng::new(99);
            let y = tape.dropout(vars[0], 0.3, Mode::Train, &mut drng).unwrap();
            let l = weighted_sum(&mut tape, y);
            (tape, l, vars)
        },
        64,
        8,
    );
    assert_grads(rep);
}

// ---- bce ----

#[test]
fn bce_values() {
    let mut tape = Tape::<f64>::new();
    let p = tape.input(&Tensor::new(vec![1], vec![0.5]).unwrap());
    let l = tape.bce_loss(p, &[1.0]).unwrap();
    assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-12);

    let p = tape.input(&Tensor::new(vec![1], vec![1.0]).unwrap());
    let l = tape.bce_loss(p, &[1.0]).unwrap();
    let v = tape.value(l)[0];
    assert!(v.is_finite() && (v - (-(1.0f64 - 1e-7).ln())).abs() < 1e-15);

    let p = tape.input(&Tensor::new(vec![2], vec![0.9, 0.1]).unwrap());
    let l = tape.bce_loss(p, &[1.0, 0.0]).unwrap();
    assert!((tape.value(l)[0] - 0.1054).abs() < 1e-4);

    let p = tape.input(&Tensor::new(vec![1], vec![0.3]).unwrap());
    assert!(tape.bce_loss(p, &[0.5]).is_err());
    assert!(tape.bce_loss(p, &[1.0, 0.0]).is_err());
}

#[test]
fn bce_gradients() {
    let mut rng = Rng::new(13);
    let params = vec![random(vec![6], 3.0, &mut rng)];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let s = tape.sigmoid(vars[0]);
            let l = tape.bce_loss(s, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
            (tape, l, vars)
        },
        64,
        9,
    );
    assert_grads(rep);
}

// ---- graph ops ----

#[test]
fn mix_and_sum_nodes_gradients() {
    let mut rng = Rng::new(14);
    let adj: Vec<f64> = {
        let n = 4;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.uniform();
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        a
    };
    let params = vec![random(vec![2, 4, 3], 1.0, &mut rng)];
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let m = tape.mix_nodes(vars[0], &adj).unwrap();
            let s = tape.sum_nodes(m).unwrap();
            let l = weighted_sum(&mut tape, s);
            (tape, l, vars)
        },
        64,
        10,
    );
    assert_grads(rep);
}

// ---- backward ----

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::<f32>::full(vec![2, 3, 4], 0.7).with_grad();
    let mut tape = Tape::new();
    let xv = tape.param(&x);
    let l = tape.sum(xv);
    let g = tape.backward(l);
    assert!(g.get(xv).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_sigmoid_at_zero() {
    let w = Tensor::<f64>::new(vec![1, 1], vec![0.0]).unwrap().with_grad();
    let mut tape = Tape::new();
    let one = tape.input(&Tensor::full(vec![1, 1], 1.0));
    let wv = tape.param(&w);
    let z = tape.linear(one, wv, None).unwrap();
    let s = tape.sigmoid(z);
    let l = tape.sum(s);
    let g = tape.backward(l);
    assert_eq!(g.get(wv).unwrap(), &[0.25]);
}

#[test]
fn backward_without_parameters_is_empty() {
    let mut tape = Tape::<f32>::new();
    let x = tape.input(&Tensor::full(vec![3], 1.0));
    let l = tape.sum(x);
    assert!(tape.backward(l).is_empty());
}

#[test]
fn gradients_populate_tensor_grad() {
    let mut w = Tensor::<f32>::full(vec![2], 1.0).with_grad();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let l = tape.sum(wv);
        tape.backward(l).accumulate_into(wv, &mut w);
    }
    assert_eq!(w.grad().unwrap(), &[2.0, 2.0]);
}

#[test]
fn composed_stack_gradients() {
    // conv -> bn -> leaky -> pool -> linear -> sigmoid -> bce on a tiny batch
    let mut rng = Rng::new(15);
    let params = vec![
        random(vec![2, 1, 1, 5], 1.0, &mut rng),
        random(vec![2], 0.5, &mut rng),
        random(vec![2], 0.5, &mut rng),
        random(vec![2], 0.5, &mut rng),
        random(vec![1, 2 * 2 * 3], 1.0, &mut rng),
        random(vec![1], 0.5, &mut rng),
    ];
    let x = random(vec![3, 1, 2, 6], 1.0, &mut rng);
    let rep = check(
        &params,
        &|p| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
            let xv = tape.input(&x);
            let c = tape.conv_time(xv, vars[0], vars[1]).unwrap();
            let mut st = BatchNormState::new(2);
            let n = tape.batch_norm(c, vars[2], vars[3], &mut st, Mode::Train).unwrap();
            let a = tape.leaky_relu(n, 0.01);
            let m = tape.max_pool_time(a).unwrap();
            let f = tape.reshape(m, vec![3, 12]).unwrap();
            let o = tape.linear(f, vars[4], Some(vars[5])).unwrap();
            let o = tape.reshape(o, vec![3]).unwrap();
            let s = tape.sigmoid(o);
            let l = tape.bce_loss(s, &[1.0, 0.0, 1.0]).unwrap();
            (tape, l, vars)
        },
        64,
        11,
    );
    assert_grads(rep);
}
