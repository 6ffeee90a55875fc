//! Zero-phase Butterworth bandpass built from second-order sections.
//!
//! Design: analog Butterworth prototype, lowpass-to-bandpass transform at
//! prewarped edges, bilinear transform. Each section carries one zero at
//! z = 1 and one at z = -1 plus a conjugate pole pair, and is scaled to unit
//! gain at the band centre. Filtering runs forward then backward with odd
//! extension at both ends and steady-state initial conditions, so the
//! magnitude response is squared and the phase cancels.

use super::Recording;
use crate::error::{invalid, Result};
use num_complex::Complex64;
use std::f64::consts::PI;

/// Butterworth order of the lowpass prototype.
pub const ORDER: usize = 4;

/// Second-order section `b0 + b1 z^-1 + b2 z^-2 / 1 + a1 z^-1 + a2 z^-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Complex response at normalized angular frequency `w` (rad/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z1 * self.a[1] + z2 * self.a[2];
        num / den
    }

    /// Steady-state state vector for a unit step input (transposed direct form II).
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let r1 = b1 - a1 * b0;
        let r2 = b2 - a2 * b0;
        let z1 = (r1 + r2) / (1.0 + a1 + a2);
        [z1, r2 - a2 * z1]
    }
}

/// Designs a bandpass from an `order`-th order Butterworth lowpass
/// prototype (`2 * order` poles, `order` sections).
pub fn butterworth_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<Vec<Biquad>> {
    if order == 0 {
        return invalid("filter order must be positive");
    }
    if !(low > 0.0 && low < high) {
        return invalid(format!("band edges must satisfy 0 < low < high, got {low}..{high}"));
    }
    if high >= fs / 2.0 {
        return invalid(format!("high edge {high} Hz is not below Nyquist {} Hz", fs / 2.0));
    }
    let fs2 = 2.0 * fs;
    let wl = fs2 * (PI * low / fs).tan();
    let wh = fs2 * (PI * high / fs).tan();
    let bw = wh - wl;
    let w0 = (wl * wh).sqrt();

    let mut poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let a = p * (bw / 2.0);
        let d = (a * a - w0 * w0).sqrt();
        for s in [a + d, a - d] {
            poles.push((fs2 + s) / (fs2 - s));
        }
    }

    // Pair each upper-half-plane pole with its conjugate; real poles pair up.
    let tol = 1e-12;
    let mut pairs: Vec<(Complex64, Complex64)> = poles
        .iter()
        .filter(|p| p.im > tol)
        .map(|&p| (p, p.conj()))
        .collect();
    let mut reals: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= tol).map(|p| p.re).collect();
    reals.sort_by(f64::total_cmp);
    for c in reals.chunks(2) {
        let second = c.get(1).copied().unwrap_or(0.0);
        pairs.push((Complex64::new(c[0], 0.0), Complex64::new(second, 0.0)));
    }
    debug_assert_eq!(pairs.len(), order);

    let wc = 2.0 * (w0 / fs2).atan();
    let sections = pairs
        .into_iter()
        .map(|(p1, p2)| {
            let a = [1.0, -(p1 + p2).re, (p1 * p2).re];
            let mut sec = Biquad { b: [1.0, 0.0, -1.0], a };
            let g = sec.response(wc).norm();
            sec.b.iter_mut().for_each(|v| *v /= g);
            sec
        })
        .collect();
    Ok(sections)
}

fn sosfilt(sos: &[Biquad], x: &mut [f64], init: &[[f64; 2]]) {
    for (sec, z0) in sos.iter().zip(init) {
        let [b0, b1, b2] = sec.b;
        let [_, a1, a2] = sec.a;
        let (mut z1, mut z2) = (z0[0], z0[1]);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Initial states of a cascade in steady state for a unit step.
fn sos_step_states(sos: &[Biquad]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sos.iter()
        .map(|s| {
            let z = s.step_state();
            let out = [z[0] * scale, z[1] * scale];
            scale *= s.b.iter().sum::<f64>() / s.a.iter().sum::<f64>();
            out
        })
        .collect()
}

/// Forward-backward filtering with odd extension of `3 * (2 * sections + 1)`
/// samples at each end (capped at `len - 1`).
pub fn sosfiltfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = sos_step_states(sos);
    let scaled = |v: f64| zi.iter().map(|z| [z[0] * v, z[1] * v]).collect::<Vec<_>>();

    let init = scaled(ext[0]);
    sosfilt(sos, &mut ext, &init);
    ext.reverse();
    let init = scaled(ext[0]);
    sosfilt(sos, &mut ext, &init);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase 4th-order Butterworth bandpass applied to every sensor.
pub fn bandpass(rec: &Recording, low: f64, high: f64) -> Result<Recording> {
    let sos = butterworth_bandpass(ORDER, low, high, rec.sample_rate)?;
    Ok(rec.map_channels(rec.sample_rate, rec.n_samples, |row| sosfiltfilt(&sos, row)))
}
