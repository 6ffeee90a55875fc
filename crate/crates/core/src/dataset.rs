//! In-memory frame datasets.

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;
use crate::signal::{self, Frame, Recording};
use std::collections::BTreeSet;

/// Frames of one or more patients sharing a sensor layout. Frame `i`
/// occupies `data[i * ns * nt..][..ns * nt]`, sensor-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub n_sensors: usize,
    pub n_times: usize,
    pub sensor_positions: Vec<[f64; 3]>,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
    pub patient_ids: Vec<String>,
    pub start_times: Vec<f64>,
}

impl FrameSet {
    pub fn empty(n_sensors: usize, n_times: usize, sensor_positions: Vec<[f64; 3]>) -> Self {
        Self {
            n_sensors,
            n_times,
            sensor_positions,
            data: Vec::new(),
            labels: Vec::new(),
            patient_ids: Vec::new(),
            start_times: Vec::new(),
        }
    }

    /// Preprocesses every recording and concatenates the frames in input order.
    pub fn from_recordings(recordings: &[Recording]) -> Result<Self> {
        let Some(first) = recordings.first() else {
            return invalid("no recordings to preprocess");
        };
        let layout = signal::FrameLayout::for_rate(signal::TARGET_RATE_HZ);
        let mut set = Self::empty(first.n_sensors, layout.len, first.sensor_positions.clone());
        for rec in recordings {
            if rec.n_sensors != set.n_sensors || rec.sensor_positions != set.sensor_positions {
                return invalid(format!(
                    "recording {} does not share the sensor layout of {}",
                    rec.patient_id, first.patient_id
                ));
            }
            for f in signal::preprocess(rec)? {
                set.push(&f)?;
            }
        }
        Ok(set)
    }

    pub fn push(&mut self, f: &Frame) -> Result<()> {
        if f.n_sensors != self.n_sensors || f.n_times != self.n_times {
            return invalid(format!(
                "frame is {}x{}, dataset holds {}x{}",
                f.n_sensors, f.n_times, self.n_sensors, self.n_times
            ));
        }
        self.data.extend_from_slice(&f.data);
        self.labels.push(f.label);
        self.patient_ids.push(f.patient_id.clone());
        self.start_times.push(f.start_time);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame_len(&self) -> usize {
        self.n_sensors * self.n_times
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.frame_len()..][..self.frame_len()]
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Distinct patient ids, sorted.
    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.patient_ids.iter().collect();
        set.into_iter().cloned().collect()
    }

    /// Indices of frames belonging to any of `patients`, in dataset order.
    pub fn indices_of(&self, patients: &[String]) -> Vec<usize> {
        let want: BTreeSet<&String> = patients.iter().collect();
        (0..self.len()).filter(|&i| want.contains(&self.patient_ids[i])).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.n_sensors, self.n_times, self.sensor_positions.clone());
        out.data.reserve(indices.len() * self.frame_len());
        for &i in indices {
            out.data.extend_from_slice(self.frame(i));
            out.labels.push(self.labels[i]);
            out.patient_ids.push(self.patient_ids[i].clone());
            out.start_times.push(self.start_times[i]);
        }
        out
    }

    /// Frames of `patients`, grouped by patient id in sorted order and in
    /// dataset order within a patient, so the result does not depend on how
    /// patients were interleaved in `self`.
    pub fn patient_subset(&self, patients: &[String]) -> Self {
        let mut idx = self.indices_of(patients);
        idx.sort_by(|&a, &b| self.patient_ids[a].cmp(&self.patient_ids[b]));
        self.subset(&idx)
    }

    /// Concatenated frame values for `indices`.
    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            out.extend_from_slice(self.frame(i));
        }
        out
    }
}

/// All positives plus an equal number of negatives drawn uniformly without
/// replacement, in shuffled order. Returns indices into `labels`.
pub fn balance_indices(labels: &[u8], rng: &mut Rng) -> Result<Vec<usize>> {
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i] == 1);
    if pos.is_empty() {
        return Err(Error::EmptyClass("no positive frames to balance against".into()));
    }
    if neg.len() < pos.len() {
        return invalid(format!(
            "{} negative frames cannot match {} positives",
            neg.len(),
            pos.len()
        ));
    }
    let mut out = pos;
    let mut chosen = rng.sample_indices(neg.len(), out.len());
    chosen.sort_unstable();
    out.extend(chosen.into_iter().map(|k| neg[k]));
    rng.shuffle(&mut out);
    Ok(out)
}
