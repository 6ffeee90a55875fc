//! One finite-difference case per autodiff op, plus both full models.

use super::{random, Build};
use megspike::models::{Model, ModelKind, ModelSpec, SensorGraph};
use megspike::rng::Rng;
use megspike::synth;
use megspike::tensor::{BatchNormState, Mode, Tape, Tensor, Var};

pub struct Case {
    pub name: &'static str,
    pub params: Vec<Tensor<f64>>,
    pub build: Box<Build<'static>>,
    /// Coordinates sampled per parameter tensor.
    pub per_tensor: usize,
}

/// Projects `v` onto fixed pseudo-random weights.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var) -> Var {
    let n = tape.value(v).len();
    let flat = tape.reshape(v, vec![1, n]).unwrap();
    let mut rng = Rng::new(4242);
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let w = tape.input(&Tensor::new(vec![1, n], w).unwrap());
    let y = tape.linear(flat, w, None).unwrap();
    tape.sum(y)
}

fn bind(tape: &mut Tape<f64>, p: &[Tensor<f64>]) -> Vec<Var> {
    p.iter().map(|t| tape.param(t)).collect()
}

fn case(
    name: &'static str,
    params: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static,
) -> Case {
    Case {
        name,
        params,
        build: Box::new(move |p| {
            let mut tape = Tape::new();
            let vars = bind(&mut tape, p);
            let out = f(&mut tape, &vars);
            let l = weighted_sum(&mut tape, out);
            (tape, l, vars)
        }),
        per_tensor: 64,
    }
}

pub fn op_cases() -> Vec<Case> {
    let mut rng = Rng::new(31);
    let mut r = |shape: Vec<usize>, scale: f64| random(shape, scale, &mut rng);
    let adj: Vec<f64> = {
        let mut g = Rng::new(32);
        let n = 4;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = g.uniform();
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        a
    };
    vec![
        case("conv_time", vec![r(vec![2, 2, 3, 6], 1.0), r(vec![3, 2, 1, 5], 1.0), r(vec![3], 0.5)], |t, v| {
            t.conv_time(v[0], v[1], v[2]).unwrap()
        }),
        case("batch_norm (train)", vec![r(vec![3, 2, 2, 4], 2.0), r(vec![2], 1.5), r(vec![2], 1.0)], |t, v| {
            let mut st = BatchNormState::new(2);
            t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train).unwrap()
        }),
        case("batch_norm (eval)", vec![r(vec![2, 3, 5], 2.0), r(vec![3], 1.5), r(vec![3], 1.0)], |t, v| {
            let mut st = BatchNormState {
                running_mean: vec![0.1, -0.2, 0.3],
                running_var: vec![0.5, 1.5, 2.0],
            };
            t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval).unwrap()
        }),
        case("leaky_relu", vec![r(vec![4, 6], 1.0)], |t, v| t.leaky_relu(v[0], 0.01)),
        case("max_pool_time", vec![r(vec![2, 3, 7], 1.0)], |t, v| t.max_pool_time(v[0]).unwrap()),
        case("linear", vec![r(vec![3, 5], 1.0), r(vec![4, 5], 1.0), r(vec![4], 0.5)], |t, v| {
            t.linear(v[0], v[1], Some(v[2])).unwrap()
        }),
        case("sigmoid", vec![r(vec![10], 4.0)], |t, v| t.sigmoid(v[0])),
        case("dropout", vec![r(vec![20], 1.0)], |t, v| {
            t.dropout(v[0], 0.3, Mode::Train, &mut Rng::new(99)).unwrap()
        }),
        case("bce_loss", vec![r(vec![6], 3.0)], |t, v| {
            let s = t.sigmoid(v[0]);
            t.bce_loss(s, &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap()
        }),
        case("mix_nodes", vec![r(vec![2, 4, 3], 1.0)], move |t, v| t.mix_nodes(v[0], &adj).unwrap()),
        case("sum_nodes", vec![r(vec![2, 4, 3], 1.0)], |t, v| t.sum_nodes(v[0]).unwrap()),
        case("reshape", vec![r(vec![2, 6], 1.0)], |t, v| t.reshape(v[0], vec![3, 4]).unwrap()),
        case("sum", vec![r(vec![7], 1.0)], |t, v| t.sum(v[0])),
    ]
}

/// Full model with perturbed parameters, train-mode batchnorm and a fixed
/// dropout stream, scored by BCE on a batch of four frames.
pub fn model_case(kind: ModelKind, ns: usize) -> Case {
    let graph = SensorGraph::from_positions(&synth::sensor_layout(ns, 0.1, &mut Rng::new(ns as u64))).unwrap();
    let base = Model::<f32>::new(ModelSpec::new(kind, ns), &mut Rng::new(21)).unwrap().cast::<f64>();
    let mut rng = Rng::new(22);
    let params: Vec<Tensor<f64>> = base
        .params()
        .iter()
        .map(|t| {
            let noise = random(t.shape().to_vec(), 0.1, &mut rng);
            let v = t.values().iter().zip(noise.values()).map(|(a, b)| a + b).collect();
            Tensor::new(t.shape().to_vec(), v).unwrap().with_grad()
        })
        .collect();
    let x = random(vec![4, ns, 30], 1.0, &mut rng);
    Case {
        name: match kind {
            ModelKind::TimeCnn => "Time CNN model",
            ModelKind::TimeCnnGcn => "Time CNN-GCN model",
        },
        params,
        build: Box::new(move |p| {
            let mut m = base.clone();
            for (dst, src) in m.params_mut().iter_mut().zip(p) {
                *dst = src.clone();
            }
            let mut tape = Tape::new();
            let xv = tape.input(&x);
            let f = m.forward(&mut tape, xv, Some(&graph), Mode::Train, &mut Rng::new(5)).unwrap();
            let loss = tape.bce_loss(f.output, &[1.0, 0.0, 0.0, 1.0]).unwrap();
            (tape, loss, f.params)
        }),
        per_tensor: 6,
    }
}
