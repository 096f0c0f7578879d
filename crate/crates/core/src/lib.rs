//! Non-neural pipeline for joint speaker diarization and identification.
//!
//! The crate consumes per-frame probability sample tensors produced by an
//! external neural model (Monte Carlo dropout passes) and provides the rest of
//! the chain:
//!
//! - [`signal`]: WAV ingestion, alignment padding, AWGN augmentation and dither.
//! - [`modspec`]: stacked ENV/TFS modulation-spectrum features.
//! - [`cepstral`]: mel-cepstra with deltas, grouped onto modulation frames.
//! - [`labels`]: ground-truth ingestion, GT-SAD and meeting statistics.
//! - [`uq`]: sample aggregation, truncated-Gaussian fits, entropies, calibration.
//! - [`reseg`]: simple smoothing and the forward/RTS Kalman smoother, model fusion.
//! - [`score`]: frame- and time-based DER and classification metrics.
//! - [`synth`]: seeded synthetic truth and prediction streams.
//!
//! With the default `parallel` feature the data-parallel loops run on rayon;
//! without it the same code runs sequentially.

pub mod cepstral;
pub mod dsp;
pub mod error;
pub mod labels;
pub mod modspec;
pub mod par;
pub mod reseg;
pub mod score;
pub mod signal;
pub mod synth;
pub mod uq;

pub use error::{Error, Result};
pub use labels::{LabelMatrix, MeetingStats, SadMask, Utterance};
pub use signal::{AudioSignal, FrameSpec};
pub use uq::{FrameUncertainty, SampleTensor};

