mod common;

use common::check;
use megspike::models::{build_adjacency, Model, ModelKind, ModelSpec, SensorGraph};
use megspike::rng::Rng;
use megspike::synth;
use megspike::tensor::{Mode, Tape, Tensor};

fn frames(batch: usize, ns: usize, seed: u64) -> Vec<f32> {
    let mut rng = Rng::new(seed);
    (0..batch * ns * 30).map(|_| rng.normal() as f32).collect()
}

fn graph(ns: usize) -> SensorGraph {
    let pos = synth::sensor_layout(ns, 0.1, &mut Rng::new(ns as u64));
    SensorGraph::from_positions(&pos).unwrap()
}

fn model(kind: ModelKind, ns: usize, seed: u64) -> Model {
    Model::new(ModelSpec::new(kind, ns), &mut Rng::new(seed)).unwrap()
}

/// Model whose batchnorm statistics have been moved off their defaults by
/// a few train-mode passes, so eval mode is not trivially the identity.
fn warmed(kind: ModelKind, ns: usize) -> Model {
    let mut m = model(kind, ns, 1);
    let g = graph(ns);
    for s in 0..3 {
        let x = Tensor::new(vec![4, ns, 30], frames(4, ns, 100 + s)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        m.forward(&mut tape, xv, Some(&g), Mode::Train, &mut Rng::new(s)).unwrap();
    }
    m
}

#[test]
fn full_size_feature_shape() {
    let m = model(ModelKind::TimeCnn, 274, 0);
    let z = m.features(&frames(1, 274, 0)).unwrap();
    assert_eq!(z.len(), 274 * 7);
    let p = m.predict(&frames(1, 274, 0), None).unwrap();
    assert_eq!(p.len(), 1);
    let g = model(ModelKind::TimeCnnGcn, 274, 0);
    assert_eq!(g.param("fc0.weight").unwrap().shape(), [128, 256]);
    assert_eq!(m.param("fc0.weight").unwrap().shape(), [128, 1918]);
}

#[test]
fn zero_input_gives_zero_features() {
    let m = model(ModelKind::TimeCnn, 5, 0);
    let z = m.features(&vec![0.0; 5 * 30]).unwrap();
    assert!(z.iter().all(|&v| v == 0.0));
}

#[test]
fn features_do_not_leak_between_sensors() {
    for kind in [ModelKind::TimeCnn, ModelKind::TimeCnnGcn] {
        let ns = 9;
        let m = warmed(kind, ns);
        let x = frames(1, ns, 7);
        let mut y = x.clone();
        for t in 0..30 {
            y[5 * 30 + t] += 0.5 + t as f32 * 0.1;
        }
        let (zx, zy) = (m.features(&x).unwrap(), m.features(&y).unwrap());
        for s in 0..ns {
            let (a, b) = (&zx[s * 7..][..7], &zy[s * 7..][..7]);
            if s == 5 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b, "sensor {s} changed");
            }
        }
    }
}

#[test]
fn gcn_prediction_invariant_to_sensor_relabeling() {
    let ns = 12;
    let m = warmed(ModelKind::TimeCnnGcn, ns);
    let g = graph(ns);
    let mut perm: Vec<usize> = (0..ns).collect();
    Rng::new(3).shuffle(&mut perm);
    let x = frames(3, ns, 8);
    let mut xp = vec![0.0; x.len()];
    for b in 0..3 {
        for i in 0..ns {
            let src = &x[(b * ns + perm[i]) * 30..][..30];
            xp[(b * ns + i) * 30..][..30].copy_from_slice(src);
        }
    }
    let m64 = m.cast::<f64>();
    let to64 = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let p = m64.predict(&to64(&x), Some(&g)).unwrap();
    let q = m64.predict(&to64(&xp), Some(&g.permuted(&perm))).unwrap();
    for (a, b) in p.iter().zip(&q) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    // Embeddings themselves, before the decision block.
    let emb = |frames: Vec<f64>, g: &SensorGraph| {
        let mut tape = Tape::new();
        let xv = tape.input(&Tensor::new(vec![3, ns, 30], frames).unwrap());
        let mut mm = m64.clone();
        let f = mm.forward(&mut tape, xv, Some(g), Mode::Eval, &mut Rng::new(0)).unwrap();
        tape.value(f.embedding.unwrap()).to_vec()
    };
    let (e1, e2) = (emb(to64(&x), &g), emb(to64(&xp), &g.permuted(&perm)));
    assert_eq!(e1.len(), 3 * 256);
    let scale = e1.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for (a, b) in e1.iter().zip(&e2) {
        assert!((a - b).abs() <= 1e-6 * scale);
    }
    // The flattened Time CNN depends on sensor order.
    let c = warmed(ModelKind::TimeCnn, ns);
    assert_ne!(c.predict(&x, None).unwrap(), c.predict(&xp, None).unwrap());
}

#[test]
fn single_node_gcn_is_stacked_affine() {
    let m = model(ModelKind::TimeCnnGcn, 1, 4).cast::<f64>();
    let g = build_adjacency(&[0.0], 1).unwrap();
    assert_eq!(g.normalized, vec![1.0]);
    let x: Vec<f64> = frames(1, 1, 9).iter().map(|&v| v as f64).collect();
    let z = m.features(&x).unwrap();
    let mut h = z.clone();
    for i in 0..3 {
        let w = m.param(&format!("gcn{i}.weight")).unwrap();
        let b = m.param(&format!("gcn{i}.bias")).unwrap().values();
        let (o, inp) = (w.shape()[0], w.shape()[1]);
        h = (0..o)
            .map(|r| {
                let v = b[r] + (0..inp).map(|c| w.values()[r * inp + c] * h[c]).sum::<f64>();
                if v >= 0.0 { v } else { 0.01 * v }
            })
            .collect();
    }
    let mut tape = Tape::new();
    let xv = tape.input(&Tensor::new(vec![1, 1, 30], x).unwrap());
    let f = m.clone().forward(&mut tape, xv, Some(&g), Mode::Eval, &mut Rng::new(0)).unwrap();
    let e = tape.value(f.embedding.unwrap());
    for (a, b) in e.iter().zip(&h) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn zero_features_give_zero_embedding() {
    let m = model(ModelKind::TimeCnnGcn, 6, 2);
    let mut tape = Tape::new();
    let xv = tape.input(&Tensor::zeros(vec![1, 6, 30]));
    let f = m.clone().forward(&mut tape, xv, Some(&graph(6)), Mode::Eval, &mut Rng::new(0)).unwrap();
    assert!(tape.value(f.features).iter().all(|&v| v == 0.0));
    assert!(tape.value(f.embedding.unwrap()).iter().all(|&v| v == 0.0));
}

#[test]
fn zero_decision_weights_give_one_half() {
    for kind in [ModelKind::TimeCnn, ModelKind::TimeCnnGcn] {
        let mut m = model(kind, 4, 5);
        for i in 0..4 {
            m.param_mut(&format!("fc{i}.weight")).unwrap().values_mut().fill(0.0);
        }
        let p = m.predict(&frames(3, 4, 1), Some(&graph(4))).unwrap();
        assert_eq!(p, vec![0.5; 3]);
    }
}

#[test]
fn eval_is_deterministic_and_train_is_seeded() {
    let ns = 5;
    let g = graph(ns);
    let m = warmed(ModelKind::TimeCnnGcn, ns);
    let x = frames(2, ns, 3);
    assert_eq!(m.predict(&x, Some(&g)).unwrap(), m.predict(&x, Some(&g)).unwrap());
    let run = |seed| {
        let mut mm = m.clone();
        let mut tape = Tape::new();
        let xv = tape.input(&Tensor::new(vec![2, ns, 30], x.clone()).unwrap());
        let f = mm.forward(&mut tape, xv, Some(&g), Mode::Train, &mut Rng::new(seed)).unwrap();
        tape.value(f.output).to_vec()
    };
    assert_eq!(run(42), run(42));
}

#[test]
fn probabilities_in_open_unit_interval() {
    let mut m = model(ModelKind::TimeCnn, 3, 6);
    m.param_mut("fc3.bias").unwrap().values_mut()[0] = 80.0;
    let p = m.predict(&frames(4, 3, 2), None).unwrap();
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn batch_prediction_matches_single_frames() {
    for kind in [ModelKind::TimeCnn, ModelKind::TimeCnnGcn] {
        let ns = 7;
        let g = graph(ns);
        let m = warmed(kind, ns);
        let x = frames(5, ns, 11);
        let batch = m.predict(&x, Some(&g)).unwrap();
        for (k, p) in batch.iter().enumerate() {
            let one = m.predict(&x[k * ns * 30..][..ns * 30], Some(&g)).unwrap();
            assert!((one[0] - p).abs() <= 1e-6);
        }
    }
}

#[test]
fn argument_errors() {
    let gcn = model(ModelKind::TimeCnnGcn, 4, 0);
    assert!(gcn.predict(&frames(1, 4, 0), None).is_err());
    assert!(gcn.predict(&frames(1, 4, 0), Some(&graph(5))).is_err());
    assert!(gcn.predict(&frames(1, 4, 0)[..100], Some(&graph(4))).is_err());
    let mut tape = Tape::new();
    let xv = tape.input(&Tensor::<f32>::zeros(vec![1, 4, 32]));
    assert!(gcn.clone().forward(&mut tape, xv, Some(&graph(4)), Mode::Eval, &mut Rng::new(0)).is_err());
}

fn model_gradients(kind: ModelKind) {
    let case = common::cases::model_case(kind, 6);
    let rep = check(&case.params, &*case.build, case.per_tensor, 23);
    assert!(rep.checked > 100, "{rep:?}");
    assert!(rep.enough_checked(), "{rep:?}");
    assert!(rep.max_rel_err <= common::REL_TOL, "{rep:?}");
}

#[test]
fn timecnn_gradients_match_finite_differences() {
    model_gradients(ModelKind::TimeCnn);
}

#[test]
fn timecnn_gcn_gradients_match_finite_differences() {
    model_gradients(ModelKind::TimeCnnGcn);
}
