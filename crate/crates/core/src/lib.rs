//! Frequency-domain backdoor attacks and defenses for deep time-series
//! classifiers.
//!
//! The crate bundles a small reverse-mode autodiff engine, a DFT-based
//! sensitivity analysis (frequency heatmaps), a four-model classifier zoo,
//! trigger generators (static, FGSM, PGD, JSMA and the heatmap-guided
//! optimizer), the iterative poison-training loop, and the adapted
//! defenses (fine-pruning, Neural Cleanse with unlearning, FST).

pub mod autodiff;
pub mod data;
pub mod error;
pub mod models;
pub mod optim;
pub mod rng;
pub mod spectral;

pub use error::{Error, Result};
