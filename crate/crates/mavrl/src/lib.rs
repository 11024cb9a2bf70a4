//! Meta-adversarial multi-view representation learning.
//!
//! A library and CLI for bi-level episodic training with bootstrapped
//! dual-view encoders, label-free multi-view latent attacks, and a
//! consistency-regularized robust meta-objective, together with the
//! adversarial-querying baseline, single-encoder ablations, and the
//! diagnostics (CKA, loss surfaces, obfuscated-gradient probes) needed to
//! verify the mechanisms at desk scale.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod objective;
pub mod params;
pub mod seeding;
pub mod train;

pub mod data;
pub mod diag;

pub use error::{Error, Result};
