//! Artist recognition engine.
//!
//! Two front ends produce track embeddings from audio: a GMM/i-vector chain
//! over MFCCs and a convolutional network over log-mel spectrograms whose
//! 256-dim last hidden layer serves as a deep audio feature. Both are scored
//! against enrolled artist models with Gaussian PLDA; the systems can be
//! combined by early (feature concatenation) or late (score averaging)
//! fusion. A synthetic corpus generator makes the whole pipeline testable
//! end to end at desk scale.
//!
//! Module map:
//!
//! - [`dsp`] — framing, mel filterbank, log-mel spectrograms, MFCC, CMVN
//! - [`ubm`] — diagonal-covariance GMM with EM training and sufficient stats
//! - [`tvspace`] — total-variability subspace training and i-vector extraction
//! - [`deepnet`] — 5-conv + 1-FC classifier with from-scratch backprop
//! - [`backend`] — PLDA training/scoring, enrollment, early/late fusion
//! - [`evalkit`] — EER, accuracy, score matrices, training-size sweep
//! - [`corpus`] — synthetic corpora, WAV ingestion, splits, persistence
//! - [`pipeline`] — glue that turns manifests into embeddings and trials

pub mod backend;
pub mod corpus;
pub mod deepnet;
pub mod dsp;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod tvspace;
pub mod ubm;
pub mod util;

pub use error::{Error, Result};
