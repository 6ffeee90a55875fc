use super::{Frame, Recording};

pub const FRAME_LEN_S: f64 = 0.200;
pub const OVERLAP_S: f64 = 0.060;
/// Spikes closer than this to either frame border do not count.
pub const BORDER_S: f64 = 0.030;
/// Slack for floating point comparisons on second-valued times.
const TIME_EPS: f64 = 1e-9;

/// Frame length and hop in samples for a given rate (30 and 21 at 150 Hz).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameLayout {
    pub len: usize,
    pub hop: usize,
}

impl FrameLayout {
    pub fn for_rate(rate: f64) -> Self {
        let len = (FRAME_LEN_S * rate).round() as usize;
        let overlap = (OVERLAP_S * rate).round() as usize;
        Self {
            len,
            hop: len - overlap,
        }
    }

    /// `floor((n - len) / hop) + 1`, or 0 when a single frame does not fit.
    pub fn count(&self, n_samples: usize) -> usize {
        if n_samples < self.len {
            0
        } else {
            (n_samples - self.len) / self.hop + 1
        }
    }
}

/// 1 iff some spike lies in `[start + 30 ms, end - 30 ms]` (inclusive).
/// `spike_times` must be sorted.
pub fn label_frame(start: f64, end: f64, spike_times: &[f64]) -> u8 {
    let lo = start + BORDER_S - TIME_EPS;
    let hi = end - BORDER_S + TIME_EPS;
    let first = spike_times.partition_point(|&t| t < lo);
    u8::from(spike_times.get(first).is_some_and(|&t| t <= hi))
}

/// Cuts 200 ms frames every 140 ms (60 ms overlap); a trailing partial
/// window is dropped.
pub fn extract_frames(rec: &Recording) -> Vec<Frame> {
    let layout = FrameLayout::for_rate(rec.sample_rate);
    let n_frames = layout.count(rec.n_samples);
    (0..n_frames)
        .map(|k| {
            let s0 = k * layout.hop;
            let mut data = Vec::with_capacity(rec.n_sensors * layout.len);
            for s in 0..rec.n_sensors {
                data.extend_from_slice(&rec.channel(s)[s0..s0 + layout.len]);
            }
            let start = s0 as f64 / rec.sample_rate;
            let end = (s0 + layout.len) as f64 / rec.sample_rate;
            Frame {
                data,
                n_sensors: rec.n_sensors,
                n_times: layout.len,
                label: label_frame(start, end, &rec.spike_times),
                patient_id: rec.patient_id.clone(),
                start_time: start,
            }
        })
        .collect()
}
