//! Command-line interface.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 on
//! data, IO or model errors. Failures print one line to stderr:
//! `error: <kind>: <message>`.

use crate::config::RunConfig;
use crate::dataset::FrameSet;
use crate::error::{invalid, Error, Result};
use crate::evaluation::{self, f1_curve, optimal_threshold, threshold_grid};
use crate::io;
use crate::models::{ModelKind, SensorGraph};
use crate::rng::{derive_seed, Rng};
use crate::synth;
use crate::training::{self, make_cv_plan, run_crossval, train_model};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "megspike", version, about = "Interictal spike detection on MEG frames")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (JSON); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort of recordings.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Filter, resample and frame recordings into one frame dataset.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Directory of recordings (default: data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output frame dataset (default: frames_dir or data/frames).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on a single train/validation patient split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Frame dataset (default: frames_dir, else a cohort synthesized
        /// from the configuration).
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Model kinds to train (default: models from the configuration).
        #[arg(long, value_delimiter = ',')]
        model: Vec<ModelKind>,
        /// Output directory (default: out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Patient-wise repeated k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        common: Common,
        /// Frame dataset (default: frames_dir, else a cohort synthesized
        /// from the configuration).
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Report directory (default: out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write every trained checkpoint.
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Choose the f1-maximizing threshold on validation frames and store it
    /// in the checkpoint.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame dataset directory.
        #[arg(long)]
        frames: PathBuf,
        /// Restrict to these patients (comma separated).
        #[arg(long, value_delimiter = ',')]
        patients: Vec<String>,
    },
    /// Balanced (threshold 0.5) and imbalanced (calibrated threshold) metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame dataset directory.
        #[arg(long)]
        frames: PathBuf,
        /// Restrict to these patients (comma separated).
        #[arg(long, value_delimiter = ',')]
        patients: Vec<String>,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame spike probabilities as CSV.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frame dataset directory.
        #[arg(long)]
        frames: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs the command line `argv` (including the program name) and returns
/// the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {line}", e.code());
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Frames from an explicit path, the configured `frames_dir`, or a cohort
/// synthesized from the configuration.
fn obtain_frames(cfg: &RunConfig, explicit: Option<&Path>) -> Result<FrameSet> {
    match explicit.map(Path::to_path_buf).or_else(|| cfg.frames_dir.as_ref().map(PathBuf::from)) {
        Some(dir) => io::load_frames(&dir),
        None => {
            let cohort = synth::generate_cohort(&cfg.synth_config())?;
            FrameSet::from_recordings(&cohort)
        }
    }
}

fn graph_for(frames: &FrameSet, kinds: &[ModelKind]) -> Result<Option<SensorGraph>> {
    if kinds.iter().any(|k| k.needs_graph()) {
        SensorGraph::from_positions(&frames.sensor_positions).map(Some)
    } else {
        Ok(None)
    }
}

fn select_patients(frames: FrameSet, patients: &[String]) -> Result<FrameSet> {
    if patients.is_empty() {
        return Ok(frames);
    }
    let known = frames.patients();
    if let Some(p) = patients.iter().find(|p| !known.contains(p)) {
        return invalid(format!("patient {p} is not in the frame dataset"));
    }
    Ok(frames.patient_subset(patients))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        io::create_dir(parent)?;
    }
    io::write_bytes(path, text.as_bytes())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            let scfg = cfg.synth_config();
            scfg.validate()?;
            io::create_dir(&out)?;
            for i in 0..scfg.n_patients {
                let rec = synth::generate_recording(&scfg, i)?;
                io::save_recording(&rec, &out.join(&rec.patient_id))?;
            }
            cfg.save(&out.join("run_config.json"))?;
            eprintln!("wrote {} recordings to {}", scfg.n_patients, out.display());
            Ok(())
        }
        Command::Preprocess { common, data, out } => {
            let cfg = load_config(&common)?;
            let data = data.unwrap_or_else(|| PathBuf::from(&cfg.data_dir));
            let out = out
                .or_else(|| cfg.frames_dir.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data/frames"));
            let cohort = io::load_cohort(&data)?;
            let frames = FrameSet::from_recordings(&cohort)?;
            io::save_frames(&frames, &out)?;
            eprintln!(
                "wrote {} frames ({} spike) from {} recordings to {}",
                frames.len(),
                frames.n_positive(),
                cohort.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            common,
            frames,
            model,
            out,
        } => {
            let cfg = load_config(&common)?;
            let kinds = if model.is_empty() { cfg.models.clone() } else { model };
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let frames = obtain_frames(&cfg, frames.as_deref())?;
            let graph = graph_for(&frames, &kinds)?;
            let split = single_split(&frames.patients(), cfg.val_fraction, cfg.plan_seed())?;
            let mut rng = Rng::derive(cfg.seed, "balance", &[]);
            let train = training::balance_dataset(&frames.patient_subset(&split.train), &mut rng)?;
            let val = training::balance_dataset(&frames.patient_subset(&split.validation), &mut rng)?;
            io::create_dir(&out)?;
            io::write_json(&out.join("split.json"), &split)?;
            cfg.save(&out.join("run_config.json"))?;
            for kind in kinds {
                let tcfg = cfg.train_config(kind, derive_seed(cfg.seed, "train", &[kind as u64]));
                let outcome = train_model(&tcfg, &train, &val, graph.as_ref())?;
                let dir = out.join(kind.as_str());
                io::save_checkpoint(&outcome.checkpoint, &dir)?;
                io::write_json(&dir.join("history.json"), &outcome.history)?;
                eprintln!(
                    "{kind}: {} epochs, best validation loss {:.4} at epoch {}",
                    outcome.checkpoint.metadata.epochs_run,
                    outcome.checkpoint.metadata.best_val_loss,
                    outcome.checkpoint.metadata.best_epoch
                );
            }
            Ok(())
        }
        Command::Crossval {
            common,
            frames,
            out,
            save_checkpoints,
        } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            let frames = obtain_frames(&cfg, frames.as_deref())?;
            let graph = graph_for(&frames, &cfg.models)?;
            let plan = make_cv_plan(&frames.patients(), cfg.folds, cfg.repetitions, cfg.val_fraction, cfg.plan_seed())?;
            let result = run_crossval(&frames, &cfg.crossval_config(), &plan, graph.as_ref())?;
            write_crossval_outputs(&out, &cfg, &result.report)?;
            if save_checkpoints {
                for ((rep, fold, kind), ckpt) in &result.checkpoints {
                    io::save_checkpoint(ckpt, &out.join("checkpoints").join(format!("rep{rep}_fold{fold}_{kind}")))?;
                }
            }
            print!("{}", result.report.table());
            Ok(())
        }
        Command::Calibrate {
            common,
            checkpoint,
            frames,
            patients,
        } => {
            let _cfg = load_config(&common)?;
            let mut ckpt = io::load_checkpoint(&checkpoint)?;
            let frames = select_patients(io::load_frames(&frames)?, &patients)?;
            let graph = graph_for(&frames, &[ckpt.model.spec().kind])?;
            let probs = evaluation::predict_frames(&ckpt.model, graph.as_ref(), &frames)?;
            let grid = threshold_grid();
            let t = optimal_threshold(&probs, &frames.labels, &grid)?;
            let f1 = f1_curve(&probs, &frames.labels, &[t, 0.5])?;
            ckpt.metadata.threshold = Some(t);
            io::save_checkpoint(&ckpt, &checkpoint)?;
            println!("threshold {t:.3} (validation f1 {:.1}% vs {:.1}% at 0.5)", f1[0], f1[1]);
            Ok(())
        }
        Command::Evaluate {
            common,
            checkpoint,
            frames,
            patients,
            out,
        } => {
            let cfg = load_config(&common)?;
            let ckpt = io::load_checkpoint(&checkpoint)?;
            let frames = select_patients(io::load_frames(&frames)?, &patients)?;
            let graph = graph_for(&frames, &[ckpt.model.spec().kind])?;
            let threshold = ckpt.metadata.threshold.unwrap_or(0.5);
            let mut rng = Rng::derive(cfg.seed, "sampling", &[]);
            let m = evaluation::evaluate_with_threshold(&ckpt.model, graph.as_ref(), &frames, threshold, &mut rng)?;
            #[derive(Serialize)]
            struct EvalOut {
                model: ModelKind,
                threshold: f64,
                calibrated: bool,
                balanced: evaluation::Metrics,
                imbalanced: evaluation::Metrics,
                test_f1_at_half: f64,
            }
            let report = EvalOut {
                model: ckpt.model.spec().kind,
                threshold,
                calibrated: ckpt.metadata.threshold.is_some(),
                balanced: m.balanced,
                imbalanced: m.imbalanced,
                test_f1_at_half: m.test_f1_half,
            };
            let text = serde_json::to_string_pretty(&report).expect("serializable") + "\n";
            match out {
                Some(p) => write_text(&p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Predict {
            common,
            checkpoint,
            frames,
            out,
        } => {
            let _cfg = load_config(&common)?;
            let ckpt = io::load_checkpoint(&checkpoint)?;
            let frames = io::load_frames(&frames)?;
            let graph = graph_for(&frames, &[ckpt.model.spec().kind])?;
            let probs = evaluation::predict_frames(&ckpt.model, graph.as_ref(), &frames)?;
            let mut text = String::from("patient_id,start_time_s,label,probability\n");
            for i in 0..frames.len() {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    frames.patient_ids[i], frames.start_times[i], frames.labels[i], probs[i]
                ));
            }
            match out {
                Some(p) => write_text(&p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

/// `metrics.json`, `metrics.txt`, `threshold_curve.csv` and
/// `run_config.json`. Contents depend only on the configuration.
pub fn write_crossval_outputs(out: &Path, cfg: &RunConfig, report: &evaluation::MetricsReport) -> Result<()> {
    io::create_dir(out)?;
    io::write_json(&out.join("metrics.json"), report)?;
    write_text(&out.join("metrics.txt"), &report.table())?;
    write_text(&out.join("threshold_curve.csv"), &report.threshold_curve_csv())?;
    cfg.save(&out.join("run_config.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Split {
    pub train: Vec<String>,
    pub validation: Vec<String>,
}

/// Seeded train/validation split of the sorted patients:
/// `ceil(val_fraction * n)` validation patients, at least one each side.
pub fn single_split(patients: &[String], val_fraction: f64, seed: u64) -> Result<Split> {
    let mut sorted = patients.to_vec();
    sorted.sort();
    if sorted.len() < 2 {
        return invalid("need at least 2 patients for a train/validation split");
    }
    let n_val = ((val_fraction * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len() - 1);
    let mut pick = Rng::derive(seed, "split", &[]).sample_indices(sorted.len(), n_val);
    pick.sort_unstable();
    let validation: Vec<String> = pick.iter().map(|&i| sorted[i].clone()).collect();
    let train = sorted.into_iter().filter(|p| !validation.contains(p)).collect();
    Ok(Split { train, validation })
}
