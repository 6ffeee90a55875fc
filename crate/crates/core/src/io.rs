//! On-disk formats. Arrays are little-endian float32 or uint8 files next to
//! a JSON header; everything round-trips bit-exactly.
//!
//! * recording dir: `meta.json` + `data.f32` (`ns × n_samples`, sensor-major)
//! * frames dir: `index.json` + `frames.f32` (`n × ns × nt`) + `labels.u8`
//! * checkpoint dir: `model.json` (spec, metadata, manifest) + `weights.f32`

use crate::dataset::FrameSet;
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind, ModelSpec};
use crate::signal::Recording;
use crate::tensor::{BatchNormState, Tensor};
use crate::training::{Checkpoint, TrainMetadata};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FORMAT: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptDataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(io_err(path))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn f32_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Decodes `expected` float32 values, failing on any size mismatch.
fn f32_from_le(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(corrupt(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordingMeta {
    patient_id: String,
    sample_rate_hz: f64,
    ns: usize,
    n_samples: usize,
    spike_times_s: Vec<f64>,
    sensor_positions_m: Vec<[f64; 3]>,
}

pub fn save_recording(rec: &Recording, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write_json(
        &dir.join("meta.json"),
        &RecordingMeta {
            patient_id: rec.patient_id.clone(),
            sample_rate_hz: rec.sample_rate,
            ns: rec.n_sensors,
            n_samples: rec.n_samples,
            spike_times_s: rec.spike_times.clone(),
            sensor_positions_m: rec.sensor_positions.clone(),
        },
    )?;
    write_bytes(&dir.join("data.f32"), &f32_to_le(&rec.data))
}

pub fn load_recording(dir: &Path) -> Result<Recording> {
    let meta_path = dir.join("meta.json");
    let meta: RecordingMeta = read_json(&meta_path)?;
    let data_path = dir.join("data.f32");
    let data = f32_from_le(&data_path, &read_bytes(&data_path)?, meta.ns * meta.n_samples)?;
    Recording::new(
        meta.patient_id,
        meta.sample_rate_hz,
        meta.ns,
        data,
        meta.sensor_positions_m,
        meta.spike_times_s,
    )
    .map_err(|e| corrupt(&meta_path, e.to_string()))
}

/// Writes each recording to `root/<patient_id>/`.
pub fn save_cohort(recordings: &[Recording], root: &Path) -> Result<()> {
    for rec in recordings {
        save_recording(rec, &root.join(&rec.patient_id))?;
    }
    Ok(())
}

/// Loads every subdirectory of `root` holding a `meta.json`, sorted by name.
pub fn load_cohort(root: &Path) -> Result<Vec<Recording>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(corrupt(root, "no recording directories found"));
    }
    dirs.iter().map(|d| load_recording(d)).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameEntry {
    patient_id: String,
    start_time_s: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameIndex {
    n_frames: usize,
    n_sensors: usize,
    n_times: usize,
    sensor_positions_m: Vec<[f64; 3]>,
    frames: Vec<FrameEntry>,
}

pub fn save_frames(set: &FrameSet, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let index = FrameIndex {
        n_frames: set.len(),
        n_sensors: set.n_sensors,
        n_times: set.n_times,
        sensor_positions_m: set.sensor_positions.clone(),
        frames: set
            .patient_ids
            .iter()
            .zip(&set.start_times)
            .map(|(p, &t)| FrameEntry {
                patient_id: p.clone(),
                start_time_s: t,
            })
            .collect(),
    };
    write_json(&dir.join("index.json"), &index)?;
    write_bytes(&dir.join("frames.f32"), &f32_to_le(&set.data))?;
    write_bytes(&dir.join("labels.u8"), &set.labels)
}

pub fn load_frames(dir: &Path) -> Result<FrameSet> {
    let index_path = dir.join("index.json");
    let index: FrameIndex = read_json(&index_path)?;
    if index.frames.len() != index.n_frames {
        return Err(corrupt(
            &index_path,
            format!("{} index entries for {} frames", index.frames.len(), index.n_frames),
        ));
    }
    if index.sensor_positions_m.len() != index.n_sensors {
        return Err(corrupt(&index_path, "sensor positions do not match n_sensors"));
    }
    let frames_path = dir.join("frames.f32");
    let data = f32_from_le(
        &frames_path,
        &read_bytes(&frames_path)?,
        index.n_frames * index.n_sensors * index.n_times,
    )?;
    let labels_path = dir.join("labels.u8");
    let labels = read_bytes(&labels_path)?;
    if labels.len() != index.n_frames {
        return Err(corrupt(
            &labels_path,
            format!("expected {} labels, found {}", index.n_frames, labels.len()),
        ));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(corrupt(&labels_path, "labels must be 0 or 1"));
    }
    let (patient_ids, start_times) = index.frames.into_iter().map(|e| (e.patient_id, e.start_time_s)).unzip();
    Ok(FrameSet {
        n_sensors: index.n_sensors,
        n_times: index.n_times,
        sensor_positions: index.sensor_positions_m,
        data,
        labels,
        patient_ids,
        start_times,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset_bytes: usize,
    pub len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format_version: u32,
    spec: ModelSpec,
    metadata: TrainMetadata,
    manifest: Vec<ManifestEntry>,
}

/// Parameters in model order followed by `bn{i}.running_mean` and
/// `bn{i}.running_var` for each batchnorm layer.
fn checkpoint_tensors(model: &Model) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .names()
        .iter()
        .zip(model.params())
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.values().to_vec()))
        .collect();
    for (i, s) in model.batch_norm_states().iter().enumerate() {
        out.push((format!("bn{i}.running_mean"), vec![s.running_mean.len()], s.running_mean.clone()));
        out.push((format!("bn{i}.running_var"), vec![s.running_var.len()], s.running_var.clone()));
    }
    out
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let tensors = checkpoint_tensors(&ckpt.model);
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut weights = Vec::new();
    for (name, shape, values) in &tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset_bytes: weights.len(),
            len: values.len(),
        });
        weights.extend(f32_to_le(values));
    }
    write_json(
        &dir.join("model.json"),
        &CheckpointHeader {
            format_version: CHECKPOINT_FORMAT,
            spec: ckpt.model.spec().clone(),
            metadata: ckpt.metadata.clone(),
            manifest,
        },
    )?;
    write_bytes(&dir.join("weights.f32"), &weights)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let header_path = dir.join("model.json");
    let header: CheckpointHeader = read_json(&header_path)?;
    let incompatible = |msg: String| Error::IncompatibleCheckpoint(format!("{}: {msg}", dir.display()));
    if header.format_version != CHECKPOINT_FORMAT {
        return Err(incompatible(format!("unsupported format version {}", header.format_version)));
    }
    let weights_path = dir.join("weights.f32");
    let weights = read_bytes(&weights_path)?;
    let total: usize = header.manifest.iter().map(|e| e.len * 4).sum();
    if total != weights.len() {
        return Err(incompatible(format!(
            "manifest covers {total} bytes, weights.f32 has {}",
            weights.len()
        )));
    }
    let reference = Model::<f32>::new(header.spec.clone(), &mut crate::rng::Rng::new(0))
        .map_err(|e| incompatible(e.to_string()))?;
    let expected = checkpoint_tensors(&reference);
    if expected.len() != header.manifest.len() {
        return Err(incompatible(format!(
            "spec needs {} tensors, manifest lists {}",
            expected.len(),
            header.manifest.len()
        )));
    }
    let mut offset = 0;
    let mut values = Vec::with_capacity(expected.len());
    for ((name, shape, _), entry) in expected.iter().zip(&header.manifest) {
        let n: usize = shape.iter().product();
        if &entry.name != name || &entry.shape != shape || entry.len != n || entry.offset_bytes != offset {
            return Err(incompatible(format!(
                "manifest entry {} {:?} at byte {} does not match expected {name} {shape:?} at byte {offset}",
                entry.name, entry.shape, entry.offset_bytes
            )));
        }
        values.push(f32_from_le(&weights_path, &weights[offset..offset + 4 * n], n)?);
        offset += 4 * n;
    }
    let n_params = reference.params().len();
    let bn_values = values.split_off(n_params);
    let params = expected
        .iter()
        .zip(values)
        .map(|((name, shape, _), v)| Ok((name.clone(), Tensor::new(shape.clone(), v)?)))
        .collect::<Result<Vec<_>>>()?;
    let bn = bn_values
        .chunks(2)
        .map(|pair| BatchNormState {
            running_mean: pair[0].clone(),
            running_var: pair[1].clone(),
        })
        .collect();
    let model = Model::from_parts(header.spec, params, bn).map_err(|e| incompatible(e.to_string()))?;
    Ok(Checkpoint {
        model,
        metadata: header.metadata,
    })
}

/// Loads a checkpoint and checks it holds a model of kind `kind`.
pub fn load_checkpoint_as(dir: &Path, kind: ModelKind) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.model.spec().kind != kind {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{} holds a {} model, expected {kind}",
            dir.display(),
            ckpt.model.spec().kind
        )));
    }
    Ok(ckpt)
}
