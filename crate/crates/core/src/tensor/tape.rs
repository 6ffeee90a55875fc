use super::ops::{self, ConvDims, Mode, KERNEL_WIDTH, PROB_CLAMP};
use super::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use std::collections::BTreeMap;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Running statistics of one batch-norm layer.
///
/// An empty state (no channels) is "uninitialized"; eval mode rejects it.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<F = f32> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

impl<F: Scalar> BatchNormState<F> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
        }
    }

    pub fn uninitialized() -> Self {
        Self {
            running_mean: Vec::new(),
            running_var: Vec::new(),
        }
    }

    pub fn is_initialized(&self) -> bool {
        !self.running_mean.is_empty()
    }

    pub fn cast<G: Scalar>(&self) -> BatchNormState<G> {
        BatchNormState {
            running_mean: self.running_mean.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

enum Op<F> {
    Input,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        layout: (usize, usize, usize),
        train: bool,
    },
    LeakyRelu {
        x: Var,
        slope: F,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        n_in: usize,
        n_out: usize,
    },
    Sigmoid {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Option<Vec<F>>,
    },
    Bce {
        p: Var,
        labels: Vec<F>,
    },
    MixNodes {
        x: Var,
        adj: Vec<F>,
        batch: usize,
        n: usize,
        d: usize,
    },
    SumNodes {
        x: Var,
        batch: usize,
        n: usize,
        d: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the parameters bound on a tape.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    by_var: BTreeMap<Var, Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.by_var.get(&v).map(Vec::as_slice)
    }

    pub fn is_empty(&self) -> bool {
        self.by_var.is_empty()
    }

    pub fn len(&self) -> usize {
        self.by_var.len()
    }

    /// Adds the gradient of `v`, if any, into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<F>) {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }
}

/// Records a forward computation for one reverse pass.
///
/// A tape is single-use: [`Tape::backward`] consumes it, releasing every
/// intermediate buffer.
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by forward op"
        );
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Copies a node out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Input, false)
    }

    /// Binds a tensor as a leaf. It receives a gradient iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        let op = if t.requires_grad() { Op::Param } else { Op::Input };
        self.push(t.shape().to_vec(), t.values().to_vec(), op, t.requires_grad())
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).needs_grad)
    }

    /// Convolution along the last (time) axis with a `1 × 5` kernel and zero
    /// padding of 2, so the time length is preserved. Rows (sensors) never mix.
    ///
    /// `x` is `[c_in, rows, len]` or `[batch, c_in, rows, len]`; `w` is
    /// `[c_out, c_in, 1, 5]`; `b` is `[c_out]`.
    pub fn conv_time(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, c_in, rows, len) = match xs.as_slice() {
            &[c, r, l] => (1, c, r, l),
            &[n, c, r, l] => (n, c, r, l),
            _ => return invalid(format!("conv_time input must be rank 3 or 4, got {xs:?}")),
        };
        let ws = self.shape(w).to_vec();
        let c_out = match ws.as_slice() {
            &[co, ci, 1, KERNEL_WIDTH] if ci == c_in => co,
            _ => {
                return invalid(format!(
                    "kernel shape {ws:?} incompatible with {c_in} input channels (expected [c_out, {c_in}, 1, {KERNEL_WIDTH}])"
                ))
            }
        };
        if self.shape(b) != [c_out] {
            return invalid(format!("bias shape {:?}, expected [{c_out}]", self.shape(b)));
        }
        let dims = ConvDims {
            batch,
            c_in,
            c_out,
            rows,
            len,
        };
        let y = ops::conv_forward(self.value(x), self.value(w), self.value(b), dims);
        let shape = if xs.len() == 3 {
            vec![c_out, rows, len]
        } else {
            vec![batch, c_out, rows, len]
        };
        let ng = self.grad_any(&[x, w, b]);
        Ok(self.push(shape, y, Op::Conv { x, w, b, dims }, ng))
    }

    /// Batch normalization with per-channel statistics over every axis but
    /// axis 1 of a `[batch, channels, ...]` input.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<F>,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return invalid(format!("batch_norm input must be [batch, channels, ...], got {xs:?}"));
        }
        let (batch, channels) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return invalid(format!("gamma/beta must be [{channels}]"));
        }
        let layout = (batch, channels, inner);
        let fwd = match mode {
            Mode::Train => {
                if batch * inner < 2 {
                    return invalid("batch_norm in train mode needs at least 2 elements per channel");
                }
                let fwd = ops::bn_train_forward(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    batch,
                    channels,
                    inner,
                );
                if !state.is_initialized() {
                    *state = BatchNormState::new(channels);
                }
                if state.running_mean.len() != channels {
                    return Err(Error::InvalidState(format!(
                        "running stats have {} channels, input has {channels}",
                        state.running_mean.len()
                    )));
                }
                let m = F::from_f64(ops::BN_MOMENTUM);
                for c in 0..channels {
                    state.running_mean[c] = (F::one() - m) * state.running_mean[c] + m * fwd.mean[c];
                    state.running_var[c] =
                        (F::one() - m) * state.running_var[c] + m * fwd.var_unbiased[c];
                }
                fwd
            }
            Mode::Eval => {
                if !state.is_initialized() {
                    return Err(Error::InvalidState(
                        "batch_norm eval mode requires initialized running statistics".into(),
                    ));
                }
                if state.running_mean.len() != channels {
                    return Err(Error::InvalidState(format!(
                        "running stats have {} channels, input has {channels}",
                        state.running_mean.len()
                    )));
                }
                ops::bn_eval_forward(
                    self.value(x),
                    self.value(gamma),
                    self.value(beta),
                    &state.running_mean,
                    &state.running_var,
                    batch,
                    channels,
                    inner,
                )
            }
        };
        let ng = self.grad_any(&[x, gamma, beta]);
        Ok(self.push(
            xs,
            fwd.y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                layout,
                train: mode == Mode::Train,
            },
            ng,
        ))
    }

    /// Elementwise `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let slope = F::from_f64(slope);
        let y = self
            .value(x)
            .iter()
            .map(|&v| if v >= F::zero() { v } else { v * slope })
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.grad_any(&[x]);
        self.push(shape, y, Op::LeakyRelu { x, slope }, ng)
    }

    /// `(1 × 2)` max pooling with stride 2 along the last axis; a trailing odd
    /// sample is dropped.
    pub fn max_pool_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let len = *xs.last().expect("tensor has rank >= 1");
        if len < 2 {
            return invalid(format!("max_pool_time needs at least 2 time samples, got {len}"));
        }
        let outer = self.value(x).len() / len;
        let (y, argmax) = ops::maxpool_forward(self.value(x), outer, len);
        let mut shape = xs;
        *shape.last_mut().unwrap() = len / 2;
        let ng = self.grad_any(&[x]);
        Ok(self.push(shape, y, Op::MaxPool { x, argmax }, ng))
    }

    /// Fully connected layer `y = x · wᵀ + b` on the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n_out, n_in) = match ws.as_slice() {
            &[o, i] => (o, i),
            _ => return invalid(format!("linear weight must be [n_out, n_in], got {ws:?}")),
        };
        let last = *xs.last().expect("rank >= 1");
        if last != n_in {
            return invalid(format!("linear expects {n_in} input features, got {last}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [n_out] {
                return invalid(format!("linear bias must be [{n_out}], got {:?}", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / n_in;
        let y = ops::linear_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            rows,
            n_in,
            n_out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n_out;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.grad_any(&deps);
        Ok(self.push(
            shape,
            y,
            Op::Linear {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            },
            ng,
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).iter().map(|&v| ops::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.grad_any(&[x]);
        self.push(shape, y, Op::Sigmoid { x }, ng)
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return invalid(format!("dropout probability must be in [0, 1), got {p}"));
        }
        let shape = self.shape(x).to_vec();
        let ng = self.grad_any(&[x]);
        if mode == Mode::Eval || p == 0.0 {
            let y = self.value(x).to_vec();
            return Ok(self.push(shape, y, Op::Dropout { x, mask: None }, ng));
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < p { F::zero() } else { keep })
            .collect();
        let y = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(shape, y, Op::Dropout { x, mask: Some(mask) }, ng))
    }

    /// Mean binary cross-entropy of probabilities `p` against `{0, 1}` labels.
    pub fn bce_loss(&mut self, p: Var, labels: &[F]) -> Result<Var> {
        let probs = self.value(p);
        if probs.len() != labels.len() {
            return invalid(format!(
                "bce_loss: {} probabilities vs {} labels",
                probs.len(),
                labels.len()
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != F::zero() && y != F::one()) {
            return invalid(format!("bce_loss labels must be 0 or 1, got {bad:?}"));
        }
        let lo = F::from_f64(PROB_CLAMP);
        let hi = F::one() - lo;
        let n = F::from_f64(labels.len() as f64);
        let total: F = probs
            .iter()
            .zip(labels)
            .map(|(&q, &y)| {
                let q = q.max(lo).min(hi);
                -(y * q.ln() + (F::one() - y) * (F::one() - q).ln())
            })
            .sum();
        let ng = self.grad_any(&[p]);
        Ok(self.push(
            vec![1],
            vec![total / n],
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Graph propagation `y_b = A · x_b` for node features `x: [batch, n, d]`
    /// and a constant `n × n` matrix `adj`.
    pub fn mix_nodes(&mut self, x: Var, adj: &[F]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, n, d) = match xs.as_slice() {
            &[b, n, d] => (b, n, d),
            _ => return invalid(format!("mix_nodes input must be [batch, nodes, features], got {xs:?}")),
        };
        if adj.len() != n * n {
            return invalid(format!("adjacency has {} entries, expected {n}x{n}", adj.len()));
        }
        let y = ops::mix_forward(self.value(x), adj, batch, n, d, false);
        let ng = self.grad_any(&[x]);
        Ok(self.push(
            xs,
            y,
            Op::MixNodes {
                x,
                adj: adj.to_vec(),
                batch,
                n,
                d,
            },
            ng,
        ))
    }

    /// Global add pooling: `[batch, n, d] -> [batch, d]`.
    pub fn sum_nodes(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, n, d) = match xs.as_slice() {
            &[b, n, d] => (b, n, d),
            _ => return invalid(format!("sum_nodes input must be [batch, nodes, features], got {xs:?}")),
        };
        let xv = self.value(x);
        let mut y = vec![F::zero(); batch * d];
        for b in 0..batch {
            for j in 0..n {
                let row = &xv[(b * n + j) * d..][..d];
                for (o, &v) in y[b * d..][..d].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(vec![batch, d], y, Op::SumNodes { x, batch, n, d }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.iter().any(|&d| d == 0) {
            return invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            ));
        }
        let y = self.value(x).to_vec();
        let ng = self.grad_any(&[x]);
        Ok(self.push(shape, y, Op::Reshape { x }, ng))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).iter().copied().sum();
        let ng = self.grad_any(&[x]);
        self.push(vec![1], vec![s], Op::Sum { x }, ng)
    }

    /// Discrete branch decisions taken during the forward pass: leaky ReLU
    /// signs, max-pool winners and active probability clamps. Two forward
    /// passes with equal signatures lie on the same smooth piece of the
    /// network function.
    pub fn branch_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } => {
                    sig.extend(self.value(*x).iter().map(|&v| u32::from(v >= F::zero())));
                }
                Op::MaxPool { argmax, .. } => sig.extend_from_slice(argmax),
                Op::Bce { p, .. } => {
                    let lo = F::from_f64(PROB_CLAMP);
                    sig.extend(
                        self.value(*p)
                            .iter()
                            .map(|&q| u32::from(q < lo) | (u32::from(q > F::one() - lo) << 1)),
                    );
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a single-element `loss`. Returns the gradient of
    /// every bound parameter reachable from the loss; unreachable parameters
    /// get no entry.
    pub fn backward(mut self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut out = Gradients::default();
        if !self.node(loss).needs_grad {
            return out;
        }
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = std::mem::replace(
                &mut self.nodes[idx],
                Node {
                    shape: Vec::new(),
                    value: Vec::new(),
                    op: Op::Input,
                    needs_grad: false,
                },
            );
            match node.op {
                Op::Param => {
                    out.by_var.insert(Var(idx), g);
                }
                Op::Input => {}
                op => self.backprop(op, &node.value, g, &mut grads),
            }
        }
        out
    }

    fn send(&self, grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        if !self.node(v).needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    fn backprop(&self, op: Op<F>, y: &[F], g: Vec<F>, grads: &mut [Option<Vec<F>>]) {
        match op {
            Op::Input | Op::Param => unreachable!(),
            Op::Conv { x, w, b, dims } => {
                let r = ops::conv_backward(self.value(x), self.value(w), &g, dims, self.wants(x));
                if let Some(dx) = r.dx {
                    self.send(grads, x, dx);
                }
                self.send(grads, w, r.dw);
                self.send(grads, b, r.dbias);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                train,
            } => {
                let (batch, channels, inner) = layout;
                let r = ops::bn_backward(
                    &g,
                    &xhat,
                    &inv_std,
                    self.value(gamma),
                    batch,
                    channels,
                    inner,
                    train,
                );
                self.send(grads, x, r.dx);
                self.send(grads, gamma, r.dgamma);
                self.send(grads, beta, r.dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(x)
                    .iter()
                    .zip(&g)
                    .map(|(&v, &d)| if v >= F::zero() { d } else { d * slope })
                    .collect();
                self.send(grads, x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![F::zero(); self.value(x).len()];
                for (&src, &d) in argmax.iter().zip(&g) {
                    dx[src as usize] += d;
                }
                self.send(grads, x, dx);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                n_in,
                n_out,
            } => {
                let (dx, dw, db) = ops::linear_backward(
                    self.value(x),
                    self.value(w),
                    &g,
                    rows,
                    n_in,
                    n_out,
                    self.wants(x),
                );
                if let Some(dx) = dx {
                    self.send(grads, x, dx);
                }
                self.send(grads, w, dw);
                if let Some(b) = b {
                    self.send(grads, b, db);
                }
            }
            Op::Sigmoid { x } => {
                let dx = y
                    .iter()
                    .zip(&g)
                    .map(|(&s, &d)| d * s * (F::one() - s))
                    .collect();
                self.send(grads, x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = match mask {
                    Some(m) => g.iter().zip(&m).map(|(&d, &k)| d * k).collect(),
                    None => g,
                };
                self.send(grads, x, dx);
            }
            Op::Bce { p, labels } => {
                let lo = F::from_f64(PROB_CLAMP);
                let hi = F::one() - lo;
                let n = F::from_f64(labels.len() as f64);
                let up = g[0];
                let dp = self
                    .value(p)
                    .iter()
                    .zip(&labels)
                    .map(|(&q, &y)| {
                        if q < lo || q > hi {
                            F::zero()
                        } else {
                            up * (-(y / q) + (F::one() - y) / (F::one() - q)) / n
                        }
                    })
                    .collect();
                self.send(grads, p, dp);
            }
            Op::MixNodes { x, adj, batch, n, d } => {
                let dx = ops::mix_forward(&g, &adj, batch, n, d, true);
                self.send(grads, x, dx);
            }
            Op::SumNodes { x, batch, n, d } => {
                let mut dx = vec![F::zero(); batch * n * d];
                for b in 0..batch {
                    for j in 0..n {
                        dx[(b * n + j) * d..][..d].copy_from_slice(&g[b * d..][..d]);
                    }
                }
                self.send(grads, x, dx);
            }
            Op::Reshape { x } => self.send(grads, x, g),
            Op::Sum { x } => {
                let dx = vec![g[0]; self.value(x).len()];
                self.send(grads, x, dx);
            }
        }
    }
}
