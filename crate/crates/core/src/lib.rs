//! Fixed-length embedding vectors for musical-instrument sounds, learned
//! and evaluated with speaker-verification machinery: a learnable sinc
//! bandpass front-end, a residual encoder with dictionary pooling, a
//! dual-head angular-softmax objective, an enrollment/trial EER protocol
//! with pairwise significance tests, and probing classifiers over the
//! resulting embedding space.

pub mod encoder;
pub mod error;
pub mod fft;
pub mod frontend;
pub mod nn;
pub mod num;
pub mod objective;
pub mod param;
pub mod verification;

pub use error::{Error, Result};
