//! Spectral feature compression (SFC) for time-frequency source separators.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense row-major tensors, a reverse-mode tape, finite-difference
//!   gradient certification, and the `SFCT` binary tensor container.
//! * [`dsp`] — STFT/iSTFT, complex mask application, chunked inference, WAV I/O.
//! * [`bands`] — frequency band configurations (uniform, semitone, full) and
//!   their text-file format.
//! * [`nn`] — shared differentiable layers (linear, convs, RMS norm, SwiGLU, attention).
//! * [`codec`] — the band-split baseline and both SFC codecs (cross-attention
//!   and selective-scan) with positional bias and interleave plans.
//! * [`separator`] — dual-path transformer blocks operating on compressed grids.
//! * [`model`] — full encoder/separator/decoder assembly and checkpointing.
//! * [`loss`], [`metrics`], [`optim`], [`toy`], [`train`] — training and evaluation.
//! * [`cost`] — closed-form parameter/FLOP accounting.
//! * [`config`] — declarative run configuration shared by the CLI and bindings.

pub mod bands;
pub mod checkpoint;
pub mod codec;
// pub mod config;
pub mod cost;
pub mod dsp;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod separator;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Result, SfcError};
