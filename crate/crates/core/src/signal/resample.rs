//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc filter.

use super::Recording;
use crate::error::{invalid, Result};
use num_integer::Integer;
use std::f64::consts::PI;

/// Largest reduced up/down factor accepted.
const MAX_FACTOR: u64 = 1000;
/// Taps per side, in units of the larger of the two factors.
const HALF_LEN_FACTOR: usize = 10;
const KAISER_BETA: f64 = 5.0;

/// Reduced `(up, down)` with `target / rate = up / down`. Rates are resolved
/// to millihertz; anything not representable there, or needing factors above
/// 1000 after reduction, is rejected.
pub fn rational_ratio(rate: f64, target: f64) -> Result<(usize, usize)> {
    let to_mhz = |v: f64| -> Result<u64> {
        let m = v * 1000.0;
        if !(v > 0.0) || !m.is_finite() || (m - m.round()).abs() > 1e-6 * m.max(1.0) {
            return invalid(format!("unsupported sample rate {v} Hz"));
        }
        Ok(m.round() as u64)
    };
    let (r, t) = (to_mhz(rate)?, to_mhz(target)?);
    let g = r.gcd(&t);
    let (up, down) = (t / g, r / g);
    if up > MAX_FACTOR || down > MAX_FACTOR {
        return invalid(format!(
            "resampling ratio {target}/{rate} reduces to {up}/{down}, beyond supported factors"
        ));
    }
    Ok((up as usize, down as usize))
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Lowpass FIR with cutoff `1 / max(up, down)` of the upsampled rate,
/// DC gain `up`.
fn design_taps(up: usize, down: usize) -> Vec<f64> {
    let max_rate = up.max(down);
    let cutoff = 1.0 / max_rate as f64;
    let half = HALF_LEN_FACTOR * max_rate;
    let n = 2 * half + 1;
    let i0b = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let m = i as f64 - half as f64;
            let x = cutoff * m;
            let sinc = if x == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
            let r = 2.0 * i as f64 / (n - 1) as f64 - 1.0;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b;
            cutoff * sinc * w
        })
        .collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v *= up as f64 / s);
    h
}

/// Resamples `x` by `up / down` to `round(len * up / down)` samples. Output
/// sample `m` sits at input time `m * down / up`; samples outside the input
/// are treated as zero.
pub fn resample_poly(x: &[f64], up: usize, down: usize) -> Vec<f64> {
    if up == down {
        return x.to_vec();
    }
    let h = design_taps(up, down);
    let half = (h.len() / 2) as i64;
    let n_out = ((x.len() * up) as f64 / down as f64).round() as usize;
    let (up_i, down_i) = (up as i64, down as i64);
    (0..n_out as i64)
        .map(|m| {
            // y[m] = sum_n x[n] h[m*down - n*up + half]
            let centre = m * down_i;
            let n_lo = ((centre - half) as f64 / up_i as f64).ceil().max(0.0) as i64;
            let n_hi = ((centre + half).div_euclid(up_i)).min(x.len() as i64 - 1);
            (n_lo..=n_hi)
                .map(|n| x[n as usize] * h[(centre - n * up_i + half) as usize])
                .sum()
        })
        .collect()
}

/// Resamples every sensor to `target` Hz. Spike times are in seconds and
/// carry over unchanged.
pub fn resample(rec: &Recording, target: f64) -> Result<Recording> {
    if target > rec.sample_rate {
        return invalid(format!(
            "target rate {target} Hz exceeds the recording rate {} Hz",
            rec.sample_rate
        ));
    }
    let (up, down) = rational_ratio(rec.sample_rate, target)?;
    if up == down {
        return Ok(rec.clone());
    }
    let new_len = ((rec.n_samples * up) as f64 / down as f64).round() as usize;
    Ok(rec.map_channels(target, new_len, |row| resample_poly(row, up, down)))
}
