//! Recording preprocessing: bandpass filtering, resampling, framing and the
//! border-aware frame labeling rule.

mod filter;
mod framing;
mod resample;

pub use filter::{bandpass, butterworth_bandpass, sosfiltfilt, Biquad};
pub use framing::{extract_frames, label_frame, FrameLayout, BORDER_S, FRAME_LEN_S, OVERLAP_S};
pub use resample::{resample, resample_poly, rational_ratio};

use crate::error::{invalid, Result};

/// Sampling rate all frames are produced at.
pub const TARGET_RATE_HZ: f64 = 150.0;
pub const BAND_LOW_HZ: f64 = 0.5;
pub const BAND_HIGH_HZ: f64 = 50.0;

/// One patient's multichannel recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub patient_id: String,
    pub sample_rate: f64,
    pub n_sensors: usize,
    pub n_samples: usize,
    /// Sensor-major `[n_sensors * n_samples]`.
    pub data: Vec<f32>,
    /// Sensor positions in meters, one `[x, y, z]` per sensor.
    pub sensor_positions: Vec<[f64; 3]>,
    /// Annotated spike peak times in seconds, ascending.
    pub spike_times: Vec<f64>,
}

impl Recording {
    pub fn new(
        patient_id: impl Into<String>,
        sample_rate: f64,
        n_sensors: usize,
        data: Vec<f32>,
        sensor_positions: Vec<[f64; 3]>,
        spike_times: Vec<f64>,
    ) -> Result<Self> {
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return invalid(format!("sample rate must be positive, got {sample_rate}"));
        }
        if n_sensors == 0 || data.len() % n_sensors != 0 {
            return invalid(format!(
                "{} samples cannot be split across {n_sensors} sensors",
                data.len()
            ));
        }
        if sensor_positions.len() != n_sensors {
            return invalid(format!(
                "{} sensor positions for {n_sensors} sensors",
                sensor_positions.len()
            ));
        }
        let n_samples = data.len() / n_sensors;
        let duration = n_samples as f64 / sample_rate;
        if spike_times.windows(2).any(|w| w[0] > w[1]) {
            return invalid("spike times must be sorted");
        }
        if let Some(t) = spike_times.iter().find(|&&t| !(0.0..duration).contains(&t)) {
            return invalid(format!("spike time {t} outside [0, {duration})"));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            sample_rate,
            n_sensors,
            n_samples,
            data,
            sensor_positions,
            spike_times,
        })
    }

    pub fn duration(&self) -> f64 {
        self.n_samples as f64 / self.sample_rate
    }

    pub fn channel(&self, sensor: usize) -> &[f32] {
        &self.data[sensor * self.n_samples..][..self.n_samples]
    }

    /// Applies `f` to each sensor row (as f64), producing a recording with
    /// `new_len` samples at `new_rate`.
    pub(crate) fn map_channels(
        &self,
        new_rate: f64,
        new_len: usize,
        mut f: impl FnMut(&[f64]) -> Vec<f64>,
    ) -> Recording {
        let mut data = Vec::with_capacity(self.n_sensors * new_len);
        for s in 0..self.n_sensors {
            let row: Vec<f64> = self.channel(s).iter().map(|&v| f64::from(v)).collect();
            let out = f(&row);
            debug_assert_eq!(out.len(), new_len);
            data.extend(out.into_iter().map(|v| v as f32));
        }
        Recording {
            patient_id: self.patient_id.clone(),
            sample_rate: new_rate,
            n_sensors: self.n_sensors,
            n_samples: new_len,
            data,
            sensor_positions: self.sensor_positions.clone(),
            spike_times: self.spike_times.clone(),
        }
    }
}

/// A labeled `n_sensors × n_times` window of a recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Sensor-major `[n_sensors * n_times]`.
    pub data: Vec<f32>,
    pub n_sensors: usize,
    pub n_times: usize,
    /// 1 = spike.
    pub label: u8,
    pub patient_id: String,
    pub start_time: f64,
}

impl Frame {
    pub fn is_spike(&self) -> bool {
        self.label == 1
    }
}

/// Bandpass at the native rate, resample to 150 Hz, then cut labeled frames.
pub fn preprocess(rec: &Recording) -> Result<Vec<Frame>> {
    let filtered = bandpass(rec, BAND_LOW_HZ, BAND_HIGH_HZ)?;
    let resampled = resample(&filtered, TARGET_RATE_HZ)?;
    Ok(extract_frames(&resampled))
}
