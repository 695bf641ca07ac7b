//! Gradient-matching data subset selection for efficient training.
//!
//! A training subset and per-element weights are chosen so that the weighted
//! subset gradient approximates the full training (or validation) gradient,
//! then re-chosen every few epochs as the model changes.

pub mod bank;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod selectors;
pub mod solver;
pub mod trainer;

pub use bank::{GradientBank, TargetSource};
pub use dataset::{Dataset, SplitSpec};
pub use error::{Error, Result};
pub use model::{Arch, ModelState};
pub use selectors::{select, Selection, SelectorConfig, Strategy};
pub use trainer::{train, RunRecord, TrainConfig, TrainData};
