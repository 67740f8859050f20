//! Measuring how far an AI recommendation moves a human prediction.
//!
//! A participant predicts a student's final grade, sees an AI prediction
//! (optionally with a local surrogate explanation) and answers again. The
//! absolute difference between the two answers is the response shift.

pub mod agents;
pub mod analysis;
pub mod content;
pub mod dataset;
pub mod explainer;
pub mod pipeline;
pub mod predictor;
pub mod protocol;
pub mod scoring;
pub mod service;
pub mod store;

mod fsutil;
pub mod rng;
