//! Multi-task sequence-to-sequence forecasting of pedestrian bounding boxes
//! and crossing actions.
//!
//! Two architectures share one interface: a dual-encoder, dual-decoder
//! transformer and a dual-encoder, dual-decoder LSTM. Both read observed
//! box positions and per-frame speeds and predict future speeds (from which
//! future boxes are reconstructed) together with per-frame crossing
//! probabilities.

pub mod autodiff;
pub mod metrics;
pub mod models;
pub mod seqdata;
pub mod synth;
pub mod trainer;
