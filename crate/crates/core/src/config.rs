//! Flat JSON run configuration.
//!
//! One master `seed` determines every random stream of a run:
//!
//! * cohort generation: `derive_seed(seed, "synth")`
//! * cross-validation plan: `derive_seed(seed, "plan")`
//! * per `(rep, fold)`: `"balance"` (train/val balancing), `"sampling"`
//!   (balanced test sample), and `("train", rep, fold, model)` which in turn
//!   yields the `"init"`, `"dropout"` and `("shuffle", epoch)` streams.

use crate::error::{invalid, Error, Result};
use crate::models::ModelKind;
use crate::rng::derive_seed;
use crate::synth::SynthConfig;
use crate::training::{CrossvalConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // synthetic cohort
    pub n_patients: usize,
    pub duration: f64,
    pub n_sensors: usize,
    pub sample_rate: f64,
    pub spike_rate: f64,
    pub spike_amplitude_snr: f64,
    pub focal_sigma: f64,
    pub helmet_radius: f64,
    pub rhythm_amplitude: f64,
    pub amplitude_jitter: f64,
    pub width_jitter: f64,

    // models and training
    pub models: Vec<ModelKind>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,

    // cross-validation
    pub folds: usize,
    pub repetitions: usize,
    pub val_fraction: f64,

    // paths
    pub data_dir: String,
    /// Frame dataset for `train`/`crossval`; when null those commands
    /// synthesize and preprocess the cohort in memory.
    pub frames_dir: Option<String>,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        let t = TrainConfig::default();
        Self {
            seed: 0,
            n_patients: s.n_patients,
            duration: s.duration,
            n_sensors: s.n_sensors,
            sample_rate: s.sample_rate,
            spike_rate: s.spike_rate,
            spike_amplitude_snr: s.spike_amplitude_snr,
            focal_sigma: s.focal_sigma,
            helmet_radius: s.helmet_radius,
            rhythm_amplitude: s.rhythm_amplitude,
            amplitude_jitter: s.amplitude_jitter,
            width_jitter: s.width_jitter,
            models: vec![ModelKind::TimeCnn, ModelKind::TimeCnnGcn],
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            dropout: t.dropout,
            folds: 10,
            repetitions: 5,
            val_fraction: 0.1,
            data_dir: "data/recordings".into(),
            frames_dir: None,
            out_dir: "runs/default".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = crate::io::read_bytes(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::InvalidArgument(format!("config {} is not UTF-8", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes the config with every default spelled out.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.train_config(ModelKind::TimeCnn, 0).validate()?;
        if self.models.is_empty() {
            return invalid("models must list at least one model kind");
        }
        if self.folds < 2 || self.repetitions == 0 {
            return invalid("need folds >= 2 and repetitions >= 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return invalid(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_patients: self.n_patients,
            duration: self.duration,
            n_sensors: self.n_sensors,
            sample_rate: self.sample_rate,
            spike_rate: self.spike_rate,
            spike_amplitude_snr: self.spike_amplitude_snr,
            focal_sigma: self.focal_sigma,
            helmet_radius: self.helmet_radius,
            rhythm_amplitude: self.rhythm_amplitude,
            amplitude_jitter: self.amplitude_jitter,
            width_jitter: self.width_jitter,
            seed: derive_seed(self.seed, "synth", &[]),
        }
    }

    pub fn train_config(&self, kind: ModelKind, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            dropout: self.dropout,
            seed,
            kind,
        }
    }

    pub fn plan_seed(&self) -> u64 {
        derive_seed(self.seed, "plan", &[])
    }

    pub fn crossval_config(&self) -> CrossvalConfig {
        CrossvalConfig {
            models: self.models.clone(),
            train: self.train_config(self.models[0], 0),
            seed: self.seed,
        }
    }
}
