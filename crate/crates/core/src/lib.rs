//! Multimodal LSTM speaker identification with cross-modal weight sharing,
//! distractor rejection by temporal label agreement, and a synthetic
//! face/voice task.

pub mod baseline;
mod cell;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod lstm;
pub mod model;
pub mod multimodal;
pub mod numeric;
pub mod params;
pub mod trainer;

pub use cell::StepCache;
pub use error::{Error, Result};
pub use model::{train_model, Model};
