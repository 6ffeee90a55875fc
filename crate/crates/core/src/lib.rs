//! Interictal spike classification on MEG frames.
//!
//! The crate covers the whole pipeline: preprocessing of multichannel
//! recordings into labeled 200 ms frames ([`signal`]), a synthetic cohort
//! generator ([`synth`]), a small reverse-mode autodiff engine ([`tensor`]),
//! the Time CNN and Time CNN-GCN classifiers ([`models`]), patient-wise
//! cross-validated training ([`training`]), balanced and imbalanced
//! evaluation with threshold moving ([`evaluation`]), and file formats plus
//! the command line ([`io`], [`config`], [`cli`]).

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod models;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
