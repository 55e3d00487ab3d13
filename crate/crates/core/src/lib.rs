//! Spoken language identification from phonetic posteriorgrams.
//!
//! The pipeline turns per-frame phone posteriors into token sequences (frame
//! vectors, phone ids, or phone-averaged vectors), runs them through a small
//! transformer encoder and one of four sequence classifiers, and reports
//! accuracy, F1 and equal error rate. A bag-of-n-grams margin classifier
//! serves as the phonotactic baseline, and a Markov-chain generator produces
//! synthetic multilingual and code-switched corpora.

pub mod autograd;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod ngram;
pub mod nn;
pub mod params;
pub mod ppg;
pub mod seeds;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
