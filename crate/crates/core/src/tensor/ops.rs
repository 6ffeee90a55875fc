//! Forward and backward kernels. These are plain slice functions; the tape
//! in `tape.rs` owns shapes, bookkeeping and the chain rule.

use super::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Conv kernel width along time.
pub const KERNEL_WIDTH: usize = 5;
/// Zero padding on each time edge; keeps the output length equal to the input.
pub const TIME_PAD: usize = 2;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Geometry of a batched time convolution `[batch, c_in, rows, len]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub rows: usize,
    pub len: usize,
}

impl ConvDims {
    fn plane(&self) -> usize {
        self.rows * self.len
    }
}

/// Unfolds `x` into a `[c_in * 5, batch * rows * len]` column matrix.
fn im2col<F: Scalar>(x: &[F], d: ConvDims) -> Vec<F> {
    let p = d.plane();
    let ncols = d.batch * p;
    let mut cols = vec![F::zero(); d.c_in * KERNEL_WIDTH * ncols];
    for b in 0..d.batch {
        for ci in 0..d.c_in {
            let src = &x[(b * d.c_in + ci) * p..][..p];
            for k in 0..KERNEL_WIDTH {
                let dst = &mut cols[(ci * KERNEL_WIDTH + k) * ncols + b * p..][..p];
                for r in 0..d.rows {
                    let srow = &src[r * d.len..][..d.len];
                    let drow = &mut dst[r * d.len..][..d.len];
                    // output t reads input t + k - 2
                    let (lo, hi) = valid_range(k, d.len);
                    for t in lo..hi {
                        drow[t] = srow[t + k - TIME_PAD];
                    }
                }
            }
        }
    }
    cols
}

/// Output positions `t` for which `t + k - 2` lies inside `0..len`.
fn valid_range(k: usize, len: usize) -> (usize, usize) {
    let lo = TIME_PAD.saturating_sub(k);
    let hi = (len + TIME_PAD).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

pub(crate) fn conv_forward<F: Scalar>(x: &[F], w: &[F], bias: &[F], d: ConvDims) -> Vec<F> {
    let p = d.plane();
    let ncols = d.batch * p;
    let kdim = d.c_in * KERNEL_WIDTH;
    let cols = im2col(x, d);
    let mut y = vec![F::zero(); d.c_out * ncols];
    {
        let a = ArrayView2::from_shape((d.c_out, kdim), w).expect("kernel shape");
        let bm = ArrayView2::from_shape((kdim, ncols), &cols).expect("cols shape");
        let mut c = ArrayViewMut2::from_shape((d.c_out, ncols), &mut y).expect("out shape");
        general_mat_mul(F::one(), &a, &bm, F::zero(), &mut c);
    }
    let mut out = vec![F::zero(); d.batch * d.c_out * p];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let src = &y[co * ncols + b * p..][..p];
            let dst = &mut out[(b * d.c_out + co) * p..][..p];
            let bv = bias[co];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o = s + bv;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<F> {
    pub dx: Option<Vec<F>>,
    pub dw: Vec<F>,
    pub dbias: Vec<F>,
}

pub(crate) fn conv_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    d: ConvDims,
    need_dx: bool,
) -> ConvGrads<F> {
    let p = d.plane();
    let ncols = d.batch * p;
    let kdim = d.c_in * KERNEL_WIDTH;

    // gather dy into [c_out, batch * plane]
    let mut dym = vec![F::zero(); d.c_out * ncols];
    let mut dbias = vec![F::zero(); d.c_out];
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let src = &dy[(b * d.c_out + co) * p..][..p];
            dym[co * ncols + b * p..][..p].copy_from_slice(src);
            dbias[co] += src.iter().copied().sum::<F>();
        }
    }
    let cols = im2col(x, d);
    let dym_v = ArrayView2::from_shape((d.c_out, ncols), &dym).expect("dy shape");

    let mut dw = vec![F::zero(); d.c_out * kdim];
    {
        let cols_v = ArrayView2::from_shape((kdim, ncols), &cols).expect("cols shape");
        let mut c = ArrayViewMut2::from_shape((d.c_out, kdim), &mut dw).expect("dw shape");
        general_mat_mul(F::one(), &dym_v, &cols_v.t(), F::zero(), &mut c);
    }

    let dx = need_dx.then(|| {
        let mut dcols = vec![F::zero(); kdim * ncols];
        {
            let wv = ArrayView2::from_shape((d.c_out, kdim), w).expect("kernel shape");
            let mut c = ArrayViewMut2::from_shape((kdim, ncols), &mut dcols).expect("dcols shape");
            general_mat_mul(F::one(), &wv.t(), &dym_v, F::zero(), &mut c);
        }
        let mut dx = vec![F::zero(); d.batch * d.c_in * p];
        for b in 0..d.batch {
            for ci in 0..d.c_in {
                let dst = &mut dx[(b * d.c_in + ci) * p..][..p];
                for k in 0..KERNEL_WIDTH {
                    let src = &dcols[(ci * KERNEL_WIDTH + k) * ncols + b * p..][..p];
                    let (lo, hi) = valid_range(k, d.len);
                    for r in 0..d.rows {
                        let srow = &src[r * d.len..][..d.len];
                        let drow = &mut dst[r * d.len..][..d.len];
                        for t in lo..hi {
                            drow[t + k - TIME_PAD] += srow[t];
                        }
                    }
                }
            }
        }
        dx
    });

    ConvGrads { dx, dw, dbias }
}

/// Batch-norm forward over a `[batch, channels, inner]` layout.
///
/// Returns `(y, xhat, inv_std, batch_mean, batch_var_unbiased)`; the last two
/// are empty in eval mode.
pub(crate) struct BnForward<F> {
    pub y: Vec<F>,
    pub xhat: Vec<F>,
    pub inv_std: Vec<F>,
    pub mean: Vec<F>,
    pub var_unbiased: Vec<F>,
}

pub(crate) fn bn_train_forward<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    batch: usize,
    channels: usize,
    inner: usize,
) -> BnForward<F> {
    let count = F::from_f64((batch * inner) as f64);
    let eps = F::from_f64(BN_EPS);
    let mut mean = vec![F::zero(); channels];
    let mut var = vec![F::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let s: F = x[(b * channels + c) * inner..][..inner].iter().copied().sum();
            mean[c] += s;
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    for b in 0..batch {
        for c in 0..channels {
            let m = mean[c];
            let s: F = x[(b * channels + c) * inner..][..inner]
                .iter()
                .map(|&v| (v - m) * (v - m))
                .sum();
            var[c] += s;
        }
    }
    let inv_std: Vec<F> = var
        .iter()
        .map(|&v| F::one() / (v / count + eps).sqrt())
        .collect();
    let n = batch * inner;
    let var_unbiased = var
        .iter()
        .map(|&v| if n > 1 { v / F::from_f64((n - 1) as f64) } else { F::zero() })
        .collect();

    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * inner;
            for i in off..off + inner {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var_unbiased,
    }
}

pub(crate) fn bn_eval_forward<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    running_mean: &[F],
    running_var: &[F],
    batch: usize,
    channels: usize,
    inner: usize,
) -> BnForward<F> {
    let eps = F::from_f64(BN_EPS);
    let inv_std: Vec<F> = running_var
        .iter()
        .map(|&v| F::one() / (v + eps).sqrt())
        .collect();
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * inner;
            for i in off..off + inner {
                let h = (x[i] - running_mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    BnForward {
        y,
        xhat,
        inv_std,
        mean: Vec::new(),
        var_unbiased: Vec::new(),
    }
}

pub(crate) struct BnGrads<F> {
    pub dx: Vec<F>,
    pub dgamma: Vec<F>,
    pub dbeta: Vec<F>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward<F: Scalar>(
    dy: &[F],
    xhat: &[F],
    inv_std: &[F],
    gamma: &[F],
    batch: usize,
    channels: usize,
    inner: usize,
    train: bool,
) -> BnGrads<F> {
    let mut dgamma = vec![F::zero(); channels];
    let mut dbeta = vec![F::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * inner;
            for i in off..off + inner {
                dbeta[c] += dy[i];
                dgamma[c] += dy[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![F::zero(); dy.len()];
    let count = F::from_f64((batch * inner) as f64);
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * inner;
            let scale = gamma[c] * inv_std[c];
            for i in off..off + inner {
                dx[i] = if train {
                    scale * (dy[i] - dbeta[c] / count - xhat[i] * dgamma[c] / count)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    BnGrads { dx, dgamma, dbeta }
}

/// Max over non-overlapping pairs along the last axis; odd tail dropped.
/// Returns the pooled values and the source index of each maximum.
pub(crate) fn maxpool_forward<F: Scalar>(x: &[F], outer: usize, len: usize) -> (Vec<F>, Vec<u32>) {
    let out_len = len / 2;
    let mut y = Vec::with_capacity(outer * out_len);
    let mut arg = Vec::with_capacity(outer * out_len);
    for o in 0..outer {
        let row = &x[o * len..][..len];
        for t in 0..out_len {
            let (a, b) = (row[2 * t], row[2 * t + 1]);
            // ties resolve to the first element
            let pick = if b > a { 2 * t + 1 } else { 2 * t };
            y.push(row[pick]);
            arg.push((o * len + pick) as u32);
        }
    }
    (y, arg)
}


/// Numerically stable logistic function.
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `y = x · wᵀ (+ b)` for `x: [rows, n_in]`, `w: [n_out, n_in]`.
pub(crate) fn linear_forward<F: Scalar>(
    x: &[F],
    w: &[F],
    b: Option<&[F]>,
    rows: usize,
    n_in: usize,
    n_out: usize,
) -> Vec<F> {
    let mut y = vec![F::zero(); rows * n_out];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * n_out..][..n_out].copy_from_slice(b);
        }
    }
    let xv = ArrayView2::from_shape((rows, n_in), x).expect("x shape");
    let wv = ArrayView2::from_shape((n_out, n_in), w).expect("w shape");
    let mut yv = ArrayViewMut2::from_shape((rows, n_out), &mut y).expect("y shape");
    general_mat_mul(F::one(), &xv, &wv.t(), F::one(), &mut yv);
    y
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub(crate) fn linear_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    dy: &[F],
    rows: usize,
    n_in: usize,
    n_out: usize,
    need_dx: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let xv = ArrayView2::from_shape((rows, n_in), x).expect("x shape");
    let wv = ArrayView2::from_shape((n_out, n_in), w).expect("w shape");
    let dyv = ArrayView2::from_shape((rows, n_out), dy).expect("dy shape");
    let mut dw = vec![F::zero(); n_out * n_in];
    {
        let mut c = ArrayViewMut2::from_shape((n_out, n_in), &mut dw).expect("dw shape");
        general_mat_mul(F::one(), &dyv.t(), &xv, F::zero(), &mut c);
    }
    let mut db = vec![F::zero(); n_out];
    for r in 0..rows {
        for (o, d) in db.iter_mut().zip(&dy[r * n_out..][..n_out]) {
            *o += *d;
        }
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![F::zero(); rows * n_in];
        let mut c = ArrayViewMut2::from_shape((rows, n_in), &mut dx).expect("dx shape");
        general_mat_mul(F::one(), &dyv, &wv, F::zero(), &mut c);
        dx
    });
    (dx, dw, db)
}

/// Per-sample left multiplication `y_b = A · x_b` with `x_b: [n, d]`.
pub(crate) fn mix_forward<F: Scalar>(x: &[F], adj: &[F], batch: usize, n: usize, d: usize, transpose: bool) -> Vec<F> {
    let a = ArrayView2::from_shape((n, n), adj).expect("adjacency shape");
    let a = if transpose { a.t() } else { a };
    let mut y = vec![F::zero(); x.len()];
    for b in 0..batch {
        let xv = ArrayView2::from_shape((n, d), &x[b * n * d..][..n * d]).expect("x shape");
        let mut yv = ArrayViewMut2::from_shape((n, d), &mut y[b * n * d..][..n * d]).expect("y shape");
        general_mat_mul(F::one(), &a, &xv, F::zero(), &mut yv);
    }
    y
}
