//! Patient-wise cross-validation and the training loop.

use crate::dataset::{balance_indices, FrameSet};
use crate::error::{invalid, Error, Result};
use crate::evaluation::{self, IterationRecord, MetricsReport};
use crate::models::{Model, ModelKind, ModelSpec, SensorGraph};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Adam, AdamConfig, Mode, Tape, Tensor, PROB_CLAMP};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvIteration {
    pub repetition: usize,
    pub fold: usize,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub repetitions: usize,
    pub folds: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Sorted patient ids.
    pub patients: Vec<String>,
    /// In `(repetition, fold)` order.
    pub iterations: Vec<CvIteration>,
}

/// Seeded patient-wise k-fold plan. Patients are sorted first, so the
/// plan does not depend on the input order.
pub fn make_cv_plan(
    patient_ids: &[String],
    folds: usize,
    repetitions: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<CvPlan> {
    let mut patients = patient_ids.to_vec();
    patients.sort();
    patients.dedup();
    if folds < 2 {
        return invalid(format!("need at least 2 folds, got {folds}"));
    }
    if repetitions == 0 {
        return invalid("need at least one repetition");
    }
    if patients.len() < folds {
        return invalid(format!("{} patients cannot fill {folds} folds", patients.len()));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return invalid(format!("validation fraction must be in (0, 1), got {val_fraction}"));
    }
    let n = patients.len();
    let mut iterations = Vec::with_capacity(folds * repetitions);
    for rep in 0..repetitions {
        let mut order = patients.clone();
        Rng::derive(seed, "cv-folds", &[rep as u64]).shuffle(&mut order);
        let (base, extra) = (n / folds, n % folds);
        let mut start = 0;
        for fold in 0..folds {
            let size = base + usize::from(fold < extra);
            let mut test = order[start..start + size].to_vec();
            let mut rest: Vec<String> = order[..start].iter().chain(&order[start + size..]).cloned().collect();
            start += size;
            rest.sort();
            let n_val = ((val_fraction * rest.len() as f64).ceil() as usize).max(1);
            if n_val >= rest.len() {
                return invalid(format!(
                    "{} training patients leave none for training after validation",
                    rest.len()
                ));
            }
            let mut rng = Rng::derive(seed, "cv-validation", &[rep as u64, fold as u64]);
            let mut pick = rng.sample_indices(rest.len(), n_val);
            pick.sort_unstable();
            let mut validation: Vec<String> = pick.iter().map(|&i| rest[i].clone()).collect();
            let train: Vec<String> = rest.into_iter().filter(|p| !validation.contains(p)).collect();
            test.sort();
            validation.sort();
            iterations.push(CvIteration {
                repetition: rep,
                fold,
                train,
                validation,
                test,
            });
        }
    }
    Ok(CvPlan {
        repetitions,
        folds,
        val_fraction,
        seed,
        patients,
        iterations,
    })
}

/// Balanced subset of `frames`: all positives and as many sampled negatives.
pub fn balance_dataset(frames: &FrameSet, rng: &mut Rng) -> Result<FrameSet> {
    Ok(frames.subset(&balance_indices(&frames.labels, rng)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub kind: ModelKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            dropout: crate::models::DROPOUT,
            seed: 0,
            kind: ModelKind::TimeCnn,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return invalid("batch_size, max_epochs and patience must be positive");
        }
        if self.patience > self.max_epochs {
            return invalid(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetadata {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub threshold: Option<f64>,
}

/// Trained model plus its training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: TrainMetadata,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Mean binary cross-entropy of clamped probabilities.
pub fn bce(probs: &[f64], labels: &[u8]) -> f64 {
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(lo, hi);
            if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum();
    total / probs.len() as f64
}

/// Adam on shuffled mini-batches with early stopping on validation BCE
/// (eval mode). The returned model holds the best-validation parameters.
///
/// Streams derived from `cfg.seed`: `"init"` for weights, `"dropout"` for
/// masks and `("shuffle", epoch)` for the batch order.
pub fn train_model(
    cfg: &TrainConfig,
    train: &FrameSet,
    val: &FrameSet,
    graph: Option<&SensorGraph>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return invalid("training and validation sets must be non-empty");
    }
    if train.n_sensors != val.n_sensors || train.n_times != val.n_times {
        return invalid("training and validation frames differ in shape");
    }
    let mut spec = ModelSpec::new(cfg.kind, train.n_sensors);
    spec.nt = train.n_times;
    spec.dropout = cfg.dropout;
    let mut model = Model::new(spec, &mut Rng::derive(cfg.seed, "init", &[]))?;
    let mut dropout_rng = Rng::derive(cfg.seed, "dropout", &[]);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let mut best: Option<(Model, usize, f64)> = None;
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::derive(cfg.seed, "shuffle", &[epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = Tensor::new(vec![batch.len(), train.n_sensors, train.n_times], train.gather(batch))?;
            let y: Vec<f32> = batch.iter().map(|&i| f32::from(train.labels[i])).collect();
            let mut tape = Tape::new();
            let xv = tape.input(&x);
            let fwd = model.forward(&mut tape, xv, graph, Mode::Train, &mut dropout_rng)?;
            let loss = tape.bce_loss(fwd.output, &y)?;
            loss_sum += f64::from(tape.value(loss)[0]) * batch.len() as f64;
            let grads = tape.backward(loss);
            for (t, &v) in model.params_mut().iter_mut().zip(&fwd.params) {
                grads.accumulate_into(v, t);
            }
            let mut params: Vec<&mut Tensor> = model.params_mut().iter_mut().collect();
            adam.step(&mut params)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = bce(&evaluation::predict_frames(&model, graph, val)?, &val.labels);
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::InvalidState(format!("non-finite loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|b| val_loss < b.2) {
            best = Some((model.clone(), epoch, val_loss));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (model, best_epoch, best_val_loss) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            metadata: TrainMetadata {
                seed: cfg.seed,
                epochs_run: history.len(),
                best_epoch,
                best_val_loss,
                threshold: None,
            },
        },
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossvalConfig {
    pub models: Vec<ModelKind>,
    /// Template for every iteration; `seed` and `kind` are replaced.
    pub train: TrainConfig,
    /// Master seed for per-iteration streams.
    pub seed: u64,
}

/// Everything produced by a cross-validation run.
#[derive(Clone, Debug)]
pub struct CrossvalResult {
    pub report: MetricsReport,
    pub checkpoints: Vec<((usize, usize, ModelKind), Checkpoint)>,
}

/// Seeds of one `(repetition, fold)`: training per model kind, and shared
/// balancing/sampling streams so both models see identical data.
pub fn iteration_seed(master: u64, rep: usize, fold: usize, purpose: &str) -> u64 {
    derive_seed(master, purpose, &[rep as u64, fold as u64])
}

/// Trains and evaluates every model on every plan iteration. Iterations
/// whose validation or test patients have no spike frames are recorded as
/// skipped.
pub fn run_crossval(
    frames: &FrameSet,
    cfg: &CrossvalConfig,
    plan: &CvPlan,
    graph: Option<&SensorGraph>,
) -> Result<CrossvalResult> {
    if cfg.models.is_empty() {
        return invalid("no models to cross-validate");
    }
    if cfg.models.iter().any(|k| k.needs_graph()) && graph.is_none() {
        return invalid("timecnn-gcn requires a sensor graph");
    }
    let known = frames.patients();
    if plan.patients != known {
        return invalid("plan patients do not match the frame dataset");
    }
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    for it in &plan.iterations {
        let (rep, fold) = (it.repetition, it.fold);
        let train_all = frames.patient_subset(&it.train);
        let val_all = frames.patient_subset(&it.validation);
        let test = frames.patient_subset(&it.test);
        let mut balance_rng = Rng::new(iteration_seed(cfg.seed, rep, fold, "balance"));
        let sets = match balance_dataset(&train_all, &mut balance_rng)
            .and_then(|tr| Ok((tr, balance_dataset(&val_all, &mut balance_rng)?)))
        {
            Ok(s) => Ok(s),
            Err(Error::EmptyClass(m)) => Err(format!("training/validation: {m}")),
            Err(e) => return Err(e),
        };
        let skip_reason = match (&sets, test.n_positive()) {
            (Err(m), _) => Some(m.clone()),
            (Ok(_), 0) => Some("test patients have no spike frames".to_string()),
            _ => None,
        };
        for &kind in &cfg.models {
            let mut record = IterationRecord {
                repetition: rep,
                fold,
                model: kind,
                test_patients: it.test.clone(),
                validation_patients: it.validation.clone(),
                epochs_run: 0,
                best_val_loss: None,
                metrics: None,
                skipped: skip_reason.clone(),
            };
            if let (None, Ok((train_bal, val_bal))) = (&skip_reason, &sets) {
                let tcfg = TrainConfig {
                    kind,
                    seed: derive_seed(cfg.seed, "train", &[rep as u64, fold as u64, kind as u64]),
                    ..cfg.train.clone()
                };
                let g = kind.needs_graph().then_some(graph).flatten();
                let outcome = train_model(&tcfg, train_bal, val_bal, g)?;
                let mut sample_rng = Rng::new(iteration_seed(cfg.seed, rep, fold, "sampling"));
                let mut ckpt = outcome.checkpoint;
                let m = evaluation::evaluate_iteration(&ckpt.model, g, &test, &val_all, &mut sample_rng)?;
                ckpt.metadata.threshold = Some(m.threshold);
                record.epochs_run = ckpt.metadata.epochs_run;
                record.best_val_loss = Some(ckpt.metadata.best_val_loss);
                record.metrics = Some(m);
                checkpoints.push(((rep, fold, kind), ckpt));
            }
            records.push(record);
        }
    }
    Ok(CrossvalResult {
        report: evaluation::aggregate_cv(&records),
        checkpoints,
    })
}
