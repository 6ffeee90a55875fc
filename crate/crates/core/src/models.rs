//! Time CNN and Time CNN-GCN frame classifiers and the sensor graph.
//!
//! Both models share a per-sensor temporal feature extractor: five
//! conv→batchnorm→leaky ReLU blocks over a one-channel `ns × nt` plane with
//! `1 × 5` kernels, max pooling after the first two. Its single-channel output
//! `Z` is `ns × nf`. The Time CNN flattens `Z` sensor-major into the decision
//! block; the Time CNN-GCN runs three graph convolutions over the sensor
//! graph and sums node features first.

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::tensor::{xavier_uniform, BatchNormState, Mode, Scalar, Tape, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use serde::{Deserialize, Serialize};

pub const FRAME_TIMES: usize = 30;
pub const CONV_CHANNELS: [usize; 5] = [32, 64, 128, 256, 1];
pub const GCN_DIMS: [usize; 3] = [30, 128, 256];
pub const DECISION_DIMS: [usize; 4] = [128, 64, 32, 1];
pub const DROPOUT: f64 = 0.3;
/// Conv blocks followed by `1 × 2` max pooling.
const POOLED_BLOCKS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "timecnn")]
    TimeCnn,
    #[serde(rename = "timecnn-gcn")]
    TimeCnnGcn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::TimeCnn => "timecnn",
            ModelKind::TimeCnnGcn => "timecnn-gcn",
        }
    }

    pub fn needs_graph(self) -> bool {
        self == ModelKind::TimeCnnGcn
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timecnn" => Ok(ModelKind::TimeCnn),
            "timecnn-gcn" => Ok(ModelKind::TimeCnnGcn),
            _ => invalid(format!("unknown model kind {s:?} (expected timecnn or timecnn-gcn)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub ns: usize,
    pub nt: usize,
    pub conv_channels: Vec<usize>,
    pub gcn_dims: Vec<usize>,
    pub decision_dims: Vec<usize>,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, ns: usize) -> Self {
        Self {
            kind,
            ns,
            nt: FRAME_TIMES,
            conv_channels: CONV_CHANNELS.to_vec(),
            gcn_dims: if kind.needs_graph() { GCN_DIMS.to_vec() } else { Vec::new() },
            decision_dims: DECISION_DIMS.to_vec(),
            dropout: DROPOUT,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    /// Feature length per sensor after the pooled blocks.
    pub fn nf(&self) -> usize {
        (0..POOLED_BLOCKS).fold(self.nt, |t, _| t / 2)
    }

    pub fn decision_input(&self) -> usize {
        match self.kind {
            ModelKind::TimeCnn => self.ns * self.nf(),
            ModelKind::TimeCnnGcn => *self.gcn_dims.last().unwrap_or(&0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns == 0 {
            return invalid("model needs at least one sensor");
        }
        if self.nt != FRAME_TIMES {
            return invalid(format!("frames must have {FRAME_TIMES} time samples, got nt={}", self.nt));
        }
        if self.conv_channels != CONV_CHANNELS {
            return invalid(format!("conv channels must be {CONV_CHANNELS:?}"));
        }
        if self.decision_dims != DECISION_DIMS {
            return invalid(format!("decision dims must be {DECISION_DIMS:?}"));
        }
        let want_gcn: &[usize] = if self.kind.needs_graph() { &GCN_DIMS } else { &[] };
        if self.gcn_dims != want_gcn {
            return invalid(format!("gcn dims for {} must be {want_gcn:?}", self.kind));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope.is_finite()) {
            return invalid(format!("leaky slope must be non-negative, got {}", self.leaky_slope));
        }
        Ok(())
    }
}

/// Fully connected sensor graph with unit self-loops.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    pub n: usize,
    /// `Ã = A + I`, row-major `n × n`.
    pub adjacency: Vec<f64>,
    /// `D̃^{-1/2} Ã D̃^{-1/2}`.
    pub normalized: Vec<f64>,
}

impl SensorGraph {
    pub fn from_positions(positions: &[[f64; 3]]) -> Result<Self> {
        if positions.len() == 1 {
            return build_adjacency(&[0.0], 1);
        }
        build_adjacency(&crate::synth::geodesic_distances(positions)?, positions.len())
    }

    /// Same graph with nodes relabeled: node `i` of the result is node
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n;
        let pick = |m: &[f64]| {
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = m[perm[i] * n + perm[j]];
                }
            }
            out
        };
        Self {
            n,
            adjacency: pick(&self.adjacency),
            normalized: pick(&self.normalized),
        }
    }
}

/// Sensor graph from an `n × n` distance matrix: off-diagonal weights
/// `1 - d̂` with `d̂` the min-max normalized distance, unit diagonal.
pub fn build_adjacency(distances: &[f64], n: usize) -> Result<SensorGraph> {
    if n == 0 || distances.len() != n * n {
        return invalid(format!("distance matrix has {} entries, expected {n}x{n}", distances.len()));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for j in 0..n {
        if distances[j * n + j] != 0.0 {
            return invalid(format!("distance diagonal must be zero (entry {j})"));
        }
        for k in 0..n {
            let d = distances[j * n + k];
            if j != k {
                if !(d > 0.0 && d.is_finite()) {
                    return invalid(format!("distance ({j}, {k}) must be positive, got {d}"));
                }
                if (d - distances[k * n + j]).abs() > 1e-12 * d.max(1.0) {
                    return invalid(format!("distance matrix not symmetric at ({j}, {k})"));
                }
                lo = lo.min(d);
                hi = hi.max(d);
            }
        }
    }
    let span = hi - lo;
    if n >= 3 && !(span > 0.0) {
        return Err(Error::DegenerateGeometry("all sensor distances are equal".into()));
    }
    let mut adjacency = vec![0.0; n * n];
    for j in 0..n {
        for k in 0..n {
            adjacency[j * n + k] = if j == k {
                1.0
            } else if span > 0.0 {
                1.0 - (distances[j * n + k] - lo) / span
            } else {
                1.0
            };
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|j| 1.0 / adjacency[j * n..][..n].iter().sum::<f64>().sqrt())
        .collect();
    let normalized = (0..n * n)
        .map(|i| inv_sqrt[i / n] * adjacency[i] * inv_sqrt[i % n])
        .collect();
    Ok(SensorGraph {
        n,
        adjacency,
        normalized,
    })
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Probabilities, `[batch]`.
    pub output: Var,
    /// Feature matrices `Z`, `[batch, ns, nf]`.
    pub features: Var,
    /// Graph-level embeddings `[batch, 256]` (GCN kind only).
    pub embedding: Option<Var>,
    /// Tape node bound to each parameter, in parameter order.
    pub params: Vec<Var>,
}

/// Model parameters and batchnorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F: Scalar = f32> {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor<F>>,
    bn: Vec<BatchNormState<F>>,
}

impl<F: Scalar> Model<F> {
    /// Xavier-uniform weights, zero biases, unit batchnorm scales.
    pub fn new(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut push = |name: String, t: Tensor<F>| {
            names.push(name);
            params.push(t.with_grad());
        };
        let mut c_in = 1;
        for (i, &c) in spec.conv_channels.iter().enumerate() {
            let k = crate::tensor::KERNEL_WIDTH;
            push(format!("conv{i}.weight"), xavier_uniform(vec![c, c_in, 1, k], c_in * k, c * k, rng));
            push(format!("conv{i}.bias"), Tensor::zeros(vec![c]));
            push(format!("bn{i}.gamma"), Tensor::full(vec![c], F::one()));
            push(format!("bn{i}.beta"), Tensor::zeros(vec![c]));
            c_in = c;
        }
        let mut d_in = spec.nf();
        for (i, &d) in spec.gcn_dims.iter().enumerate() {
            push(format!("gcn{i}.weight"), xavier_uniform(vec![d, d_in], d_in, d, rng));
            push(format!("gcn{i}.bias"), Tensor::zeros(vec![d]));
            d_in = d;
        }
        let mut d_in = spec.decision_input();
        for (i, &d) in spec.decision_dims.iter().enumerate() {
            push(format!("fc{i}.weight"), xavier_uniform(vec![d, d_in], d_in, d, rng));
            push(format!("fc{i}.bias"), Tensor::zeros(vec![d]));
            d_in = d;
        }
        let bn = spec.conv_channels.iter().map(|&c| BatchNormState::new(c)).collect();
        let model = Self { spec, names, params, bn };
        model.check_shapes()?;
        Ok(model)
    }

    /// Rebuilds a model from stored parts, checking every shape.
    pub fn from_parts(spec: ModelSpec, params: Vec<(String, Tensor<F>)>, bn: Vec<BatchNormState<F>>) -> Result<Self> {
        spec.validate()?;
        let reference = Model::<F>::new(spec.clone(), &mut Rng::new(0))?;
        if params.len() != reference.params.len() {
            return invalid(format!("expected {} parameter tensors, got {}", reference.params.len(), params.len()));
        }
        for ((name, t), (rname, rt)) in params.iter().zip(reference.names.iter().zip(&reference.params)) {
            if name != rname || t.shape() != rt.shape() {
                return invalid(format!(
                    "parameter {name} {:?} does not match expected {rname} {:?}",
                    t.shape(),
                    rt.shape()
                ));
            }
        }
        if bn.len() != reference.bn.len()
            || bn.iter().zip(&reference.bn).any(|(a, b)| a.running_mean.len() != b.running_mean.len() || a.running_var.len() != b.running_var.len())
        {
            return invalid("batchnorm statistics do not match the model spec");
        }
        let (names, params) = params.into_iter().map(|(n, t)| (n, t.with_grad())).unzip();
        Ok(Self { spec, names, params, bn })
    }

    fn check_shapes(&self) -> Result<()> {
        let spec = &self.spec;
        let fc0 = self.param("fc0.weight").expect("fc0 exists");
        let want = spec.decision_input();
        if fc0.shape()[1] != want {
            return Err(Error::InvalidState(format!("decision input {} != {want}", fc0.shape()[1])));
        }
        if spec.ns == 274 && spec.nt == FRAME_TIMES {
            let fixed = if spec.kind.needs_graph() { 256 } else { 1918 };
            assert_eq!(want, fixed, "decision input for 274 sensors");
        }
        Ok(())
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.params[i])
    }

    pub fn batch_norm_states(&self) -> &[BatchNormState<F>] {
        &self.bn
    }

    pub fn batch_norm_states_mut(&mut self) -> &mut [BatchNormState<F>] {
        &mut self.bn
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|t| t.cast()).collect(),
            bn: self.bn.iter().map(|s| s.cast()).collect(),
        }
    }

    /// Records the model on `tape` for input frames `x: [batch, ns, nt]`.
    /// Train mode updates batchnorm running statistics and draws dropout
    /// masks from `rng`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<F>,
        x: Var,
        graph: Option<&SensorGraph>,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<Forward> {
        let spec = self.spec.clone();
        let xs = tape.shape(x).to_vec();
        let batch = match xs.as_slice() {
            &[b, ns, nt] if ns == spec.ns && nt == spec.nt => b,
            &[_, _, nt] if nt != spec.nt => {
                return invalid(format!("frames have {nt} time samples, model expects {}", spec.nt))
            }
            _ => {
                return invalid(format!(
                    "input shape {xs:?} does not match [batch, {}, {}]",
                    spec.ns, spec.nt
                ))
            }
        };
        let graph = match (spec.kind.needs_graph(), graph) {
            (true, None) => return invalid("timecnn-gcn requires a sensor graph"),
            (true, Some(g)) if g.n != spec.ns => {
                return invalid(format!("graph has {} nodes, model expects {} sensors", g.n, spec.ns))
            }
            (true, Some(g)) => Some(g),
            (false, _) => None,
        };

        let vars: Vec<Var> = self.params.iter().map(|t| tape.param(t)).collect();
        let mut next = 0;
        let mut take = || {
            next += 1;
            vars[next - 1]
        };
        let slope = spec.leaky_slope;

        let mut h = tape.reshape(x, vec![batch, 1, spec.ns, spec.nt])?;
        for (i, state) in self.bn.iter_mut().enumerate() {
            let (w, b, g, beta) = (take(), take(), take(), take());
            h = tape.conv_time(h, w, b)?;
            h = tape.batch_norm(h, g, beta, state, mode)?;
            h = tape.leaky_relu(h, slope);
            if i < POOLED_BLOCKS {
                h = tape.max_pool_time(h)?;
            }
        }
        let features = tape.reshape(h, vec![batch, spec.ns, spec.nf()])?;

        let (mut h, embedding) = match graph {
            None => (tape.reshape(features, vec![batch, spec.ns * spec.nf()])?, None),
            Some(g) => {
                let adj: Vec<F> = g.normalized.iter().map(|&v| F::from_f64(v)).collect();
                let mut h = features;
                for _ in &spec.gcn_dims {
                    let (w, b) = (take(), take());
                    h = tape.mix_nodes(h, &adj)?;
                    h = tape.linear(h, w, Some(b))?;
                    h = tape.leaky_relu(h, slope);
                }
                let e = tape.sum_nodes(h)?;
                (e, Some(e))
            }
        };
        let n_fc = spec.decision_dims.len();
        for i in 0..n_fc {
            let (w, b) = (take(), take());
            h = tape.linear(h, w, Some(b))?;
            if i + 1 < n_fc {
                h = tape.leaky_relu(h, slope);
                h = tape.dropout(h, spec.dropout, mode, rng)?;
            }
        }
        let h = tape.reshape(h, vec![batch])?;
        let output = tape.sigmoid(h);
        Ok(Forward {
            output,
            features,
            embedding,
            params: vars,
        })
    }

    /// Eval-mode outputs for a batch of frames `[batch * ns * nt]`.
    fn eval_batch(&self, frames: &[F], graph: Option<&SensorGraph>) -> Result<(Tape<F>, Forward)> {
        let per = self.spec.ns * self.spec.nt;
        if frames.is_empty() || frames.len() % per != 0 {
            return invalid(format!("frame buffer of {} values is not a multiple of {per}", frames.len()));
        }
        let batch = frames.len() / per;
        let x = Tensor::new(vec![batch, self.spec.ns, self.spec.nt], frames.to_vec())?;
        let mut tape = Tape::new();
        let xv = tape.input(&x);
        // Eval mode touches neither the running statistics nor the rng.
        let mut model = self.clone();
        let fwd = model.forward(&mut tape, xv, graph, Mode::Eval, &mut Rng::new(0))?;
        Ok((tape, fwd))
    }

    /// Spike probabilities for frames laid out `[batch, ns, nt]`, clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn predict(&self, frames: &[F], graph: Option<&SensorGraph>) -> Result<Vec<F>> {
        let (tape, fwd) = self.eval_batch(frames, graph)?;
        let lo = F::from_f64(crate::tensor::PROB_CLAMP);
        let hi = F::one() - lo;
        Ok(tape.value(fwd.output).iter().map(|&p| p.max(lo).min(hi)).collect())
    }

    /// Eval-mode feature matrices `Z`, `[batch, ns, nf]`.
    pub fn features(&self, frames: &[F]) -> Result<Vec<F>> {
        let graph = self.spec.kind.needs_graph().then(|| trivial_graph(self.spec.ns));
        let (tape, fwd) = self.eval_batch(frames, graph.as_ref())?;
        Ok(tape.value(fwd.features).to_vec())
    }
}

/// Identity-normalized graph used where only the CNN stage is evaluated.
fn trivial_graph(n: usize) -> SensorGraph {
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    SensorGraph {
        n,
        adjacency: eye.clone(),
        normalized: eye,
    }
}
