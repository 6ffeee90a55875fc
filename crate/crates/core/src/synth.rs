//! Synthetic MEG cohorts with known spike ground truth.
//!
//! Each patient gets per-sensor pink noise (Kellet's 7-pole filter on white
//! Gaussian noise, scaled to unit variance), a 10 Hz rhythm shared by all
//! sensors, and focal spikes. A spike is a peak-normalized second derivative
//! of a Gaussian centred on a random focus sensor; its gain on another sensor
//! falls off as `exp(-d / focal_sigma)` with `d` the geodesic distance along
//! the helmet. Spike times follow a Poisson process with a 400 ms dead time.
//!
//! Random streams are derived from the master seed: the helmet layout from
//! `("synth-layout")`, each patient's background from
//! `("synth-background", index)` and its spikes from
//! `("synth-spikes", index)`, so patients can be generated in any order.

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::signal::Recording;
use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const SPIKE_DURATION_S: f64 = 0.080;
pub const MIN_SPIKE_SEPARATION_S: f64 = 0.400;
const RHYTHM_HZ: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub duration: f64,
    pub n_sensors: usize,
    pub sample_rate: f64,
    /// Mean spikes per minute. 5.5 puts the positive-frame fraction of a
    /// 540 s recording at about 1/78.
    pub spike_rate: f64,
    /// Mean spike peak at the focus sensor over the background std there.
    pub spike_amplitude_snr: f64,
    pub focal_sigma: f64,
    pub helmet_radius: f64,
    /// Peak amplitude of the shared rhythm, in units of pink-noise std.
    pub rhythm_amplitude: f64,
    /// Spike amplitudes are scaled by `1 + U(-j, j)`.
    pub amplitude_jitter: f64,
    /// Spike durations are scaled by `1 + U(-j, j)`.
    pub width_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 95,
            duration: 540.0,
            n_sensors: 274,
            sample_rate: 150.0,
            spike_rate: 5.5,
            spike_amplitude_snr: 3.0,
            focal_sigma: 0.03,
            helmet_radius: 0.1,
            rhythm_amplitude: 0.5,
            amplitude_jitter: 0.2,
            width_jitter: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration", self.duration),
            ("sample_rate", self.sample_rate),
            ("spike_amplitude_snr", self.spike_amplitude_snr),
            ("focal_sigma", self.focal_sigma),
            ("helmet_radius", self.helmet_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be positive, got {v}"));
            }
        }
        let non_negative = [
            ("spike_rate", self.spike_rate),
            ("rhythm_amplitude", self.rhythm_amplitude),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("amplitude_jitter", self.amplitude_jitter), ("width_jitter", self.width_jitter)] {
            if !(0.0..1.0).contains(&v) {
                return invalid(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.n_patients == 0 {
            return invalid("n_patients must be positive");
        }
        if self.n_sensors < 2 {
            return invalid(format!("need at least 2 sensors, got {}", self.n_sensors));
        }
        if self.spike_rate > 0.0 && 60.0 / self.spike_rate <= MIN_SPIKE_SEPARATION_S {
            return invalid("spike rate incompatible with the 400 ms minimum separation");
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }
}

pub fn patient_id(index: usize) -> String {
    format!("synth-{index:03}")
}

/// `n` points on the upper hemisphere of radius `radius` from a Fibonacci
/// lattice, rotated about the vertical axis by a random angle.
pub fn sensor_layout(n: usize, radius: f64, rng: &mut Rng) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    let phase = rng.uniform_in(0.0, 2.0 * PI);
    (0..n)
        .map(|i| {
            let z = (i as f64 + 0.5) / n as f64;
            let rxy = (1.0 - z * z).sqrt();
            let phi = phase + golden * i as f64;
            [radius * rxy * phi.cos(), radius * rxy * phi.sin(), radius * z]
        })
        .collect()
}

/// Least-squares sphere through the points, as `(centre, radius)`. Falls
/// back to the origin-centred sphere of mean norm when the fit is
/// underdetermined (fewer than 4 points or coplanar points).
pub fn fit_sphere(points: &[[f64; 3]]) -> ([f64; 3], f64) {
    let fallback = || {
        let r = points.iter().map(|p| norm(*p)).sum::<f64>() / points.len() as f64;
        ([0.0; 3], r)
    };
    if points.len() < 4 {
        return fallback();
    }
    // |p|^2 = 2 c.p + k  with  k = r^2 - |c|^2
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    for p in points {
        let row = Vector4::new(2.0 * p[0], 2.0 * p[1], 2.0 * p[2], 1.0);
        ata += row * row.transpose();
        atb += row * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    }
    let sv = ata.singular_values();
    if sv.min() <= sv.max() * 1e-12 {
        return fallback();
    }
    let Some(sol) = ata.lu().solve(&atb) else {
        return fallback();
    };
    let c = [sol[0], sol[1], sol[2]];
    let r2 = sol[3] + c.iter().map(|v| v * v).sum::<f64>();
    if !(r2 > 0.0 && r2.is_finite()) {
        return fallback();
    }
    (c, r2.sqrt())
}

fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// Great-circle distances (meters) between sensors projected on their
/// least-squares sphere; row-major `n × n`.
pub fn geodesic_distances(positions: &[[f64; 3]]) -> Result<Vec<f64>> {
    let n = positions.len();
    if n < 2 {
        return invalid("need at least 2 sensors for distances");
    }
    let (c, r) = fit_sphere(positions);
    let mut units = Vec::with_capacity(n);
    for p in positions {
        let v = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
        let l = norm(v);
        if !(l > 0.0) {
            return Err(Error::DegenerateGeometry("sensor at the sphere centre".into()));
        }
        units.push([v[0] / l, v[1] / l, v[2] / l]);
    }
    let mut d = vec![0.0; n * n];
    for j in 0..n {
        for k in (j + 1)..n {
            let (u, v) = (units[j], units[k]);
            let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
            let cross = [
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let angle = norm(cross).atan2(dot);
            if angle * r < 1e-9 * r.max(1e-9) {
                return invalid(format!("sensors {j} and {k} coincide"));
            }
            d[j * n + k] = r * angle;
            d[k * n + j] = r * angle;
        }
    }
    Ok(d)
}

/// Peak-normalized second derivative of a Gaussian (Ricker shape) sampled
/// at `round(fs * duration)` points, symmetric about the window centre. The
/// window edges sit at four Gaussian widths, where the wavelet has decayed
/// below 1% of its peak.
pub fn spike_waveform(fs: f64, duration: f64) -> Vec<f64> {
    let n = (fs * duration).round() as usize;
    assert!(n >= 4, "spike waveform needs at least 4 samples");
    let half = (n - 1) as f64 / 2.0;
    let sigma = half / 4.0;
    let w: Vec<f64> = (0..n)
        .map(|i| {
            let u = (i as f64 - half) / sigma;
            (1.0 - u * u) * (-u * u / 2.0).exp()
        })
        .collect();
    let peak = w.iter().copied().fold(f64::MIN, f64::max);
    w.into_iter().map(|v| v / peak).collect()
}

/// One injected spike.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeEvent {
    /// Peak time in seconds (centre of the waveform).
    pub time: f64,
    pub onset_sample: usize,
    pub focus_sensor: usize,
    /// Peak amplitude at the focus sensor.
    pub amplitude: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticPatient {
    pub recording: Recording,
    pub events: Vec<SpikeEvent>,
    /// Per-sensor standard deviation of the background (pink noise plus rhythm).
    pub background_std: Vec<f64>,
}

/// Sensor positions shared by every patient of the cohort.
pub fn cohort_layout(cfg: &SynthConfig) -> Vec<[f64; 3]> {
    sensor_layout(
        cfg.n_sensors,
        cfg.helmet_radius,
        &mut Rng::derive(cfg.seed, "synth-layout", &[]),
    )
}

/// Spike peak times of one patient. Depends only on the seed, patient
/// index, duration, rate and width settings, not on the sensor count.
pub fn spike_times(cfg: &SynthConfig, patient_index: usize) -> Vec<f64> {
    let mut rng = Rng::derive(cfg.seed, "synth-spikes", &[patient_index as u64]);
    draw_spike_slots(cfg, &mut rng)
        .into_iter()
        .map(|(onset, n)| (onset as f64 + (n - 1) as f64 / 2.0) / cfg.sample_rate)
        .collect()
}

/// `(onset sample, waveform length)` for every spike, consuming the spike
/// stream in a fixed order.
fn draw_spike_slots(cfg: &SynthConfig, rng: &mut Rng) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if cfg.spike_rate <= 0.0 {
        return out;
    }
    let fs = cfg.sample_rate;
    let total = cfg.n_samples();
    let mean_gap = 60.0 / cfg.spike_rate;
    let rate = 1.0 / (mean_gap - MIN_SPIKE_SEPARATION_S);
    let mut t = rng.exponential(rate);
    loop {
        let dur = SPIKE_DURATION_S * (1.0 + cfg.width_jitter * rng.uniform_in(-1.0, 1.0));
        let n = ((fs * dur).round() as usize).max(4);
        let onset = (t * fs - (n - 1) as f64 / 2.0).round();
        if onset >= 0.0 {
            let onset = onset as usize;
            if onset + n > total {
                break;
            }
            out.push((onset, n));
        }
        t += MIN_SPIKE_SEPARATION_S + rng.exponential(rate);
    }
    out
}

/// Kellet's pink noise filter driven by standard normal noise.
fn pink_noise(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    (0..n)
        .map(|_| {
            let w = rng.normal();
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.1538520;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Generates one patient with its spike ground truth.
pub fn generate_patient(cfg: &SynthConfig, patient_index: usize) -> Result<SyntheticPatient> {
    cfg.validate()?;
    let fs = cfg.sample_rate;
    let total = cfg.n_samples();
    let ns = cfg.n_sensors;
    let positions = cohort_layout(cfg);
    let dist = geodesic_distances(&positions)?;

    let mut bg = Rng::derive(cfg.seed, "synth-background", &[patient_index as u64]);
    let rhythm_phase = bg.uniform_in(0.0, 2.0 * PI);
    let rhythm_gain: Vec<f64> = (0..ns).map(|_| cfg.rhythm_amplitude * bg.uniform_in(0.5, 1.0)).collect();
    let rhythm: Vec<f64> = (0..total)
        .map(|i| (2.0 * PI * RHYTHM_HZ * i as f64 / fs + rhythm_phase).sin())
        .collect();

    let mut data = vec![0.0f64; ns * total];
    for s in 0..ns {
        let mut row = pink_noise(total, &mut bg);
        standardize(&mut row);
        let g = rhythm_gain[s];
        for (o, (p, r)) in data[s * total..][..total].iter_mut().zip(row.iter().zip(&rhythm)) {
            *o = p + g * r;
        }
    }
    let background_std: Vec<f64> = rhythm_gain.iter().map(|g| (1.0 + g * g / 2.0).sqrt()).collect();

    let mut sp = Rng::derive(cfg.seed, "synth-spikes", &[patient_index as u64]);
    let slots = draw_spike_slots(cfg, &mut sp);
    let mut events = Vec::with_capacity(slots.len());
    for (onset, n) in slots {
        let focus = sp.below(ns);
        let amplitude = cfg.spike_amplitude_snr
            * background_std[focus]
            * (1.0 + cfg.amplitude_jitter * sp.uniform_in(-1.0, 1.0));
        let wave = spike_waveform(fs, n as f64 / fs);
        for s in 0..ns {
            let gain = amplitude * (-dist[focus * ns + s] / cfg.focal_sigma).exp();
            let row = &mut data[s * total + onset..][..n];
            for (o, w) in row.iter_mut().zip(&wave) {
                *o += gain * w;
            }
        }
        events.push(SpikeEvent {
            time: (onset as f64 + (n - 1) as f64 / 2.0) / fs,
            onset_sample: onset,
            focus_sensor: focus,
            amplitude,
            n_samples: n,
        });
    }

    let recording = Recording::new(
        patient_id(patient_index),
        fs,
        ns,
        data.into_iter().map(|v| v as f32).collect(),
        positions,
        events.iter().map(|e| e.time).collect(),
    )?;
    Ok(SyntheticPatient {
        recording,
        events,
        background_std,
    })
}

pub fn generate_recording(cfg: &SynthConfig, patient_index: usize) -> Result<Recording> {
    generate_patient(cfg, patient_index).map(|p| p.recording)
}

pub fn generate_cohort(cfg: &SynthConfig) -> Result<Vec<Recording>> {
    (0..cfg.n_patients).map(|i| generate_recording(cfg, i)).collect()
}
