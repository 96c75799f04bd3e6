//! Signal frontend: STFT/iSTFT, complex masking, chunked long-form inference,
//! and WAV file I/O.

pub mod chunk;
pub mod mask;
pub mod stft;
pub mod wav;

pub use chunk::{separate_waveform, ChunkPolicy, SpectrogramSeparator};
pub use mask::apply_mask;
pub use stft::{istft, istft_multi, stft, stft_multi, window, StftPlan};
