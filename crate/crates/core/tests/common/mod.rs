#![allow(dead_code)]

pub mod cases;

use megspike::rng::Rng;
use megspike::tensor::{Tape, Tensor, Var};

/// Builds a scalar loss from parameter tensors. Returns the tape, the loss
/// node and the node bound to each parameter (same order as the input).
pub type Build<'a> = dyn Fn(&[Tensor<f64>]) -> (Tape<f64>, Var, Vec<Var>) + 'a;

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// coordinates where no step kept the branch pattern fixed
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub const REL_TOL: f64 = 1e-5;
pub const STEPS: [f64; 3] = [1e-4, 3e-5, 1e-5];

impl GradReport {
    /// At most one coordinate in ten may be skipped for a nearby kink.
    pub fn enough_checked(&self) -> bool {
        self.checked > 0 && self.skipped * 10 <= self.checked
    }
}
/// Denominator floor for the relative error. Difference quotients of an O(1)
/// loss carry roughly 1e-12 of roundoff, so gradients below this are compared
/// on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-6;

/// Central finite differences in f64 against the tape's analytic gradient.
///
/// Tries `h` in [`STEPS`]. If a perturbation changes the branch signature
/// (leaky ReLU side, max-pool winner, probability clamp) the next smaller
/// step is used, so that the difference quotient stays on the same smooth
/// piece as the analytic derivative. Coordinates with a kink closer than the
/// smallest step are skipped: below 1e-5 the quotient's roundoff (about
/// 1e-16 / h) is itself comparable to the tolerance.
pub fn check(params: &[Tensor<f64>], build: &Build, per_tensor: usize, seed: u64) -> GradReport {
    let (tape, loss, vars) = build(params);
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss);
    let mut rng = Rng::new(seed);
    let mut rep = GradReport::default();

    for (pi, p) in params.iter().enumerate() {
        let zeros = vec![0.0; p.len()];
        let analytic = grads.get(vars[pi]).unwrap_or(&zeros).to_vec();
        let coords: Vec<usize> = if p.len() <= per_tensor {
            (0..p.len()).collect()
        } else {
            rng.sample_indices(p.len(), per_tensor)
        };
        for j in coords {
            let mut fd = None;
            for h in STEPS {
                let eval = |delta: f64| {
                    let mut ps = params.to_vec();
                    ps[pi].values_mut()[j] += delta;
                    let (t, l, _) = build(&ps);
                    (t.value(l)[0], t.branch_signature())
                };
                let (lp, sp) = eval(h);
                let (lm, sm) = eval(-h);
                if sp == base_sig && sm == base_sig {
                    fd = Some((lp - lm) / (2.0 * h));
                    break;
                }
            }
            let Some(numeric) = fd else {
                rep.skipped += 1;
                continue;
            };
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            rep.checked += 1;
            if err > rep.max_rel_err {
                rep.max_rel_err = err;
                rep.worst = Some((pi, j, a, numeric));
            }
        }
    }
    rep
}

/// Random tensor with entries uniform on `[-scale, scale]`.
pub fn random(shape: Vec<usize>, scale: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.uniform_in(-scale, scale)).collect();
    Tensor::new(shape, v).unwrap().with_grad()
}
