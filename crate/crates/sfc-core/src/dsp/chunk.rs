//! Long-form inference: split a waveform into overlapping chunks, run the
//! separator per chunk, and overlap-add the results with a linear crossfade.
//! Memory stays bounded by the chunk length rather than the track length.

use super::stft::{istft_multi, stft_multi, StftPlan};
use crate::error::{Result, SfcError};
use crate::tensor::{Scalar, Tensor};

/// Anything that maps a mixture spectrogram (2M, F, T) to per-source
/// spectrograms (N, 2M, F, T). Implemented by the full model and by the
/// trivial test doubles below.
pub trait SpectrogramSeparator<T: Scalar> {
    fn num_sources(&self) -> usize;
    fn separate_spec(&self, spec: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Passes the mixture through unchanged for every source.
pub struct IdentitySeparator {
    pub sources: usize,
}

impl<T: Scalar> SpectrogramSeparator<T> for IdentitySeparator {
    fn num_sources(&self) -> usize {
        self.sources
    }

    fn separate_spec(&self, spec: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![self.sources];
        shape.extend_from_slice(spec.shape());
        let mut data = Vec::with_capacity(spec.numel() * self.sources);
        for _ in 0..self.sources {
            data.extend_from_slice(spec.data());
        }
        Tensor::from_vec(&shape, data)
    }
}

/// Scales the mixture spectrogram by one real gain per source.
pub struct GainSeparator {
    pub gains: Vec<f64>,
}

impl<T: Scalar> SpectrogramSeparator<T> for GainSeparator {
    fn num_sources(&self) -> usize {
        self.gains.len()
    }

    fn separate_spec(&self, spec: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![self.gains.len()];
        shape.extend_from_slice(spec.shape());
        let mut data = Vec::with_capacity(spec.numel() * self.gains.len());
        for &g in &self.gains {
            let g = T::f(g);
            data.extend(spec.data().iter().map(|&v| v * g));
        }
        Tensor::from_vec(&shape, data)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ChunkPolicy {
    pub chunk_secs: f64,
    pub overlap_secs: f64,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        ChunkPolicy { chunk_secs: 12.0, overlap_secs: 6.0 }
    }
}

impl ChunkPolicy {
    fn lengths(&self, sample_rate: u32) -> Result<(usize, usize)> {
        let chunk = (self.chunk_secs * sample_rate as f64).round() as usize;
        let overlap = (self.overlap_secs * sample_rate as f64).round() as usize;
        if chunk == 0 || overlap >= chunk {
            return Err(SfcError::Config(format!(
                "chunk {}s with overlap {}s is not a valid split",
                self.chunk_secs, self.overlap_secs
            )));
        }
        Ok((chunk, overlap))
    }
}

/// Separate a full waveform. `channels` holds M equal-length channels; the
/// result is N sources × M channels × samples.
pub fn separate_waveform<T: Scalar, S: SpectrogramSeparator<T>>(
    sep: &S,
    channels: &[Vec<T>],
    sample_rate: u32,
    plan: &StftPlan,
    policy: &ChunkPolicy,
) -> Result<Vec<Vec<Vec<T>>>> {
    if channels.is_empty() || channels[0].is_empty() {
        return Err(SfcError::shape("separate", "empty input"));
    }
    let total = channels[0].len();
    if channels.iter().any(|c| c.len() != total) {
        return Err(SfcError::shape("separate", "channels differ in length"));
    }
    let (chunk_len, overlap) = policy.lengths(sample_rate)?;
    let m = channels.len();
    let n_src = sep.num_sources();
    let min_len = plan.n_fft; // keeps reflect padding valid for the tail chunk
    let step = chunk_len - overlap;

    let mut out = vec![vec![vec![T::zero(); total]; m]; n_src];
    let mut wsum = vec![T::zero(); total];
    let mut start = 0usize;
    loop {
        let end = (start + chunk_len).min(total);
        // Pull the tail chunk back if it would be too short to analyze.
        let s = if end == total { end.saturating_sub(chunk_len.max(min_len).min(total)).min(start) } else { start };
        let len = end - s;
        let slices: Vec<Vec<T>> = channels.iter().map(|c| c[s..end].to_vec()).collect();
        let spec = stft_multi(&slices, plan)?;
        let separated = sep.separate_spec(&spec)?;
        let want = [n_src, 2 * m, plan.f_bins(), spec.shape()[2]];
        if separated.shape() != want {
            return Err(SfcError::shape(
                "separate",
                format!("separator returned {:?}, expected {:?}", separated.shape(), want),
            ));
        }
        // Linear crossfade ramps: up at the head unless this is the first
        // chunk, down at the tail unless this is the last. Weights stay
        // strictly positive; the final division by wsum exactly renormalizes.
        let head = if s > 0 { overlap.min(len) } else { 0 };
        let tail = if end < total { overlap.min(len) } else { 0 };
        let weight = |i: usize| -> T {
            let mut w = 1.0f64;
            if head > 0 && i < head {
                w = w.min((i + 1) as f64 / (head + 1) as f64);
            }
            if tail > 0 && i >= len - tail {
                w = w.min((len - i) as f64 / (tail + 1) as f64);
            }
            T::f(w)
        };
        let plane = 2 * m * plan.f_bins() * spec.shape()[2];
        for src in 0..n_src {
            let block = Tensor::from_vec(
                &[2 * m, plan.f_bins(), spec.shape()[2]],
                separated.data()[src * plane..(src + 1) * plane].to_vec(),
            )?;
            let ys = istft_multi(&block, plan, len)?;
            for (ch, y) in ys.iter().enumerate() {
                for (i, v) in y.iter().enumerate() {
                    out[src][ch][s + i] += *v * weight(i);
                }
            }
        }
        for i in 0..len {
            wsum[s + i] += weight(i);
        }
        if end == total {
            break;
        }
        start += step;
    }
    for src in &mut out {
        for ch in src {
            for (v, w) in ch.iter_mut().zip(&wsum) {
                *v /= *w;
            }
        }
    }
    Ok(out)
}
