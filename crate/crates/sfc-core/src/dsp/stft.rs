//! STFT analysis/synthesis with square-root Hann windows on both sides,
//! reflect center padding, and pointwise COLA normalization on resynthesis.
//!
//! Complex spectrograms are stored as real tensors: a single channel is
//! (2, F, T) with the real plane first; M channels stack to (2M, F, T) with
//! channel c occupying rows 2c (real) and 2c+1 (imaginary).

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Result, SfcError};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftPlan {
    pub n_fft: usize,
    pub hop: usize,
}

impl StftPlan {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if n_fft < 8 || !n_fft.is_power_of_two() {
            return Err(SfcError::Config(format!("n_fft must be a power of two >= 8, got {n_fft}")));
        }
        if hop == 0 || hop >= n_fft || n_fft % hop != 0 {
            return Err(SfcError::Config(format!(
                "hop must divide n_fft and be smaller than it, got hop {hop} for n_fft {n_fft}"
            )));
        }
        Ok(StftPlan { n_fft, hop })
    }

    pub fn f_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.n_fft / 2
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples / self.hop + 1
    }
}

/// Square-root of the periodic Hann window; analysis and synthesis both use it,
/// so the overlap-added squared window is the plain Hann COLA sum.
pub fn window<T: Scalar>(n_fft: usize) -> Vec<T> {
    (0..n_fft)
        .map(|i| {
            let h = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos());
            T::f(h.sqrt())
        })
        .collect()
}

/// Sum of squared synthesis windows at each overlap-add position.
pub(crate) fn synthesis_envelope<T: Scalar>(n_fft: usize, hop: usize, frames: usize) -> Vec<T> {
    let w = window::<T>(n_fft);
    let mut env = vec![T::zero(); n_fft + (frames - 1) * hop];
    for t in 0..frames {
        for (j, wj) in w.iter().enumerate() {
            env[t * hop + j] += *wj * *wj;
        }
    }
    env
}

const ENV_FLOOR: f64 = 1e-12;

fn reflect_pad<T: Scalar>(x: &[T], pad: usize) -> Result<Vec<T>> {
    if x.len() <= pad {
        return Err(SfcError::shape(
            "stft",
            format!("signal of {} samples is too short for center padding {}", x.len(), pad),
        ));
    }
    let mut out = Vec::with_capacity(x.len() + 2 * pad);
    for i in 0..pad {
        out.push(x[pad - i]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[x.len() - 2 - i]);
    }
    Ok(out)
}

fn rfft<T: Scalar>(seg: &[Complex<T>], planner: &mut FftPlanner<T>) -> Vec<Complex<T>> {
    let mut buf = seg.to_vec();
    planner.plan_fft_forward(seg.len()).process(&mut buf);
    buf
}

/// Analyze one real channel into a (2, F, T) block appended onto `out`.
fn stft_channel<T: Scalar>(x: &[T], plan: &StftPlan, out: &mut Vec<T>) -> Result<usize> {
    let padded = reflect_pad(x, plan.pad())?;
    let frames = plan.frames_for(x.len());
    let (n, f_bins) = (plan.n_fft, plan.f_bins());
    let w = window::<T>(n);
    let mut planner = FftPlanner::<T>::new();
    let base = out.len();
    out.resize(base + 2 * f_bins * frames, T::zero());
    let mut seg = vec![Complex::new(T::zero(), T::zero()); n];
    for t in 0..frames {
        let start = t * plan.hop;
        for j in 0..n {
            seg[j] = Complex::new(padded[start + j] * w[j], T::zero());
        }
        let spec = rfft(&seg, &mut planner);
        for f in 0..f_bins {
            out[base + f * frames + t] = spec[f].re;
            out[base + (f_bins + f) * frames + t] = spec[f].im;
        }
    }
    Ok(frames)
}

/// STFT of a single channel: (2, F, T).
pub fn stft<T: Scalar>(x: &[T], plan: &StftPlan) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let frames = stft_channel(x, plan, &mut data)?;
    Tensor::from_vec(&[2, plan.f_bins(), frames], data)
}

/// STFT of M channels stacked as (2M, F, T).
pub fn stft_multi<T: Scalar>(channels: &[Vec<T>], plan: &StftPlan) -> Result<Tensor<T>> {
    if channels.is_empty() {
        return Err(SfcError::shape("stft", "no channels"));
    }
    let len = channels[0].len();
    if channels.iter().any(|c| c.len() != len) {
        return Err(SfcError::shape("stft", "channels differ in length"));
    }
    let mut data = Vec::new();
    let mut frames = 0;
    for ch in channels {
        frames = stft_channel(ch, plan, &mut data)?;
    }
    Tensor::from_vec(&[2 * channels.len(), plan.f_bins(), frames], data)
}

/// Inverse real FFT of one spectral column into a length-n frame. The
/// imaginary parts of the DC and Nyquist bins are defined to have no effect,
/// matching the adjoint below.
fn irfft_column<T: Scalar>(
    re: impl Fn(usize) -> T,
    im: impl Fn(usize) -> T,
    n: usize,
    planner: &mut FftPlanner<T>,
    buf: &mut Vec<Complex<T>>,
) -> Vec<T> {
    let f_bins = n / 2 + 1;
    buf.clear();
    buf.resize(n, Complex::new(T::zero(), T::zero()));
    buf[0] = Complex::new(re(0), T::zero());
    buf[n / 2] = Complex::new(re(f_bins - 1), T::zero());
    for f in 1..f_bins - 1 {
        let c = Complex::new(re(f), im(f));
        buf[f] = c;
        buf[n - f] = c.conj();
    }
    planner.plan_fft_inverse(n).process(buf);
    let inv_n = T::one() / T::f(n as f64);
    buf.iter().map(|c| c.re * inv_n).collect()
}

/// Synthesize `out_len` samples from a (2, F, T) block stored flat in `ri`.
/// Shared by the differentiable tape op and plain inference.
pub(crate) fn istft_core<T: Scalar>(
    ri: &[T],
    n_fft: usize,
    hop: usize,
    frames: usize,
    out_len: usize,
) -> Result<Vec<T>> {
    let f_bins = n_fft / 2 + 1;
    if ri.len() != 2 * f_bins * frames || frames == 0 {
        return Err(SfcError::shape(
            "istft",
            format!("{} values for (2, {f_bins}, {frames})", ri.len()),
        ));
    }
    let pad = n_fft / 2;
    let ola_len = n_fft + (frames - 1) * hop;
    if pad + out_len > ola_len {
        return Err(SfcError::shape(
            "istft",
            format!("{out_len} output samples exceed the {frames}-frame span"),
        ));
    }
    let w = window::<T>(n_fft);
    let mut planner = FftPlanner::<T>::new();
    let mut ola = vec![T::zero(); ola_len];
    let mut buf = Vec::new();
    for t in 0..frames {
        let frame = irfft_column(
            |f| ri[f * frames + t],
            |f| ri[(f_bins + f) * frames + t],
            n_fft,
            &mut planner,
            &mut buf,
        );
        for j in 0..n_fft {
            ola[t * hop + j] += frame[j] * w[j];
        }
    }
    let env = synthesis_envelope::<T>(n_fft, hop, frames);
    let floor = T::f(ENV_FLOOR);
    Ok((0..out_len).map(|i| ola[pad + i] / env[pad + i].max(floor)).collect())
}

/// Adjoint of [`istft_core`] as a linear map: routes an output-sample gradient
/// back to (2, F, T) spectrogram layout. Real-FFT transpose per frame:
/// d_re[f] = (c_f/n)·Re(rfft(seg))_f and d_im[f] = (c_f/n)·Im(rfft(seg))_f,
/// where c_f = 1 at DC and Nyquist (whose imaginary parts get zero gradient)
/// and 2 elsewhere.
pub(crate) fn istft_adjoint_core<T: Scalar>(
    g: &[T],
    n_fft: usize,
    hop: usize,
    frames: usize,
) -> Result<Vec<T>> {
    let f_bins = n_fft / 2 + 1;
    let pad = n_fft / 2;
    let ola_len = n_fft + (frames - 1) * hop;
    if pad + g.len() > ola_len {
        return Err(SfcError::shape("istft", "gradient longer than the synthesis span"));
    }
    let env = synthesis_envelope::<T>(n_fft, hop, frames);
    let floor = T::f(ENV_FLOOR);
    let mut ge = vec![T::zero(); ola_len];
    for (i, gi) in g.iter().enumerate() {
        ge[pad + i] = *gi / env[pad + i].max(floor);
    }
    let w = window::<T>(n_fft);
    let mut planner = FftPlanner::<T>::new();
    let mut out = vec![T::zero(); 2 * f_bins * frames];
    let inv_n = T::one() / T::f(n_fft as f64);
    let two = T::f(2.0);
    let mut seg = vec![Complex::new(T::zero(), T::zero()); n_fft];
    for t in 0..frames {
        for j in 0..n_fft {
            seg[j] = Complex::new(ge[t * hop + j] * w[j], T::zero());
        }
        let spec = rfft(&seg, &mut planner);
        for f in 0..f_bins {
            let cf = if f == 0 || f == f_bins - 1 { T::one() } else { two };
            out[f * frames + t] += cf * inv_n * spec[f].re;
            if f != 0 && f != f_bins - 1 {
                out[(f_bins + f) * frames + t] += cf * inv_n * spec[f].im;
            }
        }
    }
    Ok(out)
}

/// Resynthesize one channel from a (2, F, T) spectrogram tensor.
pub fn istft<T: Scalar>(spec: &Tensor<T>, plan: &StftPlan, out_len: usize) -> Result<Vec<T>> {
    let s = spec.shape();
    if s.len() != 3 || s[0] != 2 || s[1] != plan.f_bins() {
        return Err(SfcError::shape(
            "istft",
            format!("spec {s:?} for n_fft {} (want (2, {}, T))", plan.n_fft, plan.f_bins()),
        ));
    }
    istft_core(spec.data(), plan.n_fft, plan.hop, s[2], out_len)
}

/// Resynthesize all M channels of a (2M, F, T) spectrogram.
pub fn istft_multi<T: Scalar>(spec: &Tensor<T>, plan: &StftPlan, out_len: usize) -> Result<Vec<Vec<T>>> {
    let s = spec.shape();
    if s.len() != 3 || s[0] % 2 != 0 || s[1] != plan.f_bins() {
        return Err(SfcError::shape("istft", format!("multi-channel spec {s:?}")));
    }
    let (f_bins, frames) = (s[1], s[2]);
    let plane = 2 * f_bins * frames;
    (0..s[0] / 2)
        .map(|c| istft_core(&spec.data()[c * plane..(c + 1) * plane], plan.n_fft, plan.hop, frames, out_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn plan_rejects_bad_geometry() {
        assert!(StftPlan::new(100, 25).is_err()); // not a power of two
        assert!(StftPlan::new(256, 96).is_err()); // hop does not divide
        assert!(StftPlan::new(256, 256).is_err()); // hop == n_fft
        assert!(StftPlan::new(256, 64).is_ok());
    }

    #[test]
    fn cola_envelope_is_constant_mid_signal() {
        // Squared sqrt-Hann is Hann; hop-spaced shifts sum to n_fft/(2*hop).
        for (n, h) in [(256usize, 64usize), (256, 128), (1024, 256)] {
            let frames = 40;
            let env = synthesis_envelope::<f64>(n, h, frames);
            let expect = n as f64 / (2.0 * h as f64);
            for i in n..env.len() - n {
                assert!(
                    (env[i] - expect).abs() < 1e-6,
                    "envelope at {i} is {} (expected {expect}) for n={n} hop={h}",
                    env[i]
                );
            }
        }
    }

    #[test]
    fn roundtrip_recovers_signal() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let plan = StftPlan::new(256, 64).unwrap();
        for len in [1000usize, 1024, 1337] {
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spec = stft(&x, &plan).unwrap();
            assert_eq!(spec.shape(), &[2, 129, len / 64 + 1]);
            let y = istft(&spec, &plan, len).unwrap();
            let err = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err < 1e-10, "roundtrip error {err} at len {len}");
        }
    }

    #[test]
    fn pure_tone_concentrates_on_its_bin() {
        let plan = StftPlan::new(256, 64).unwrap();
        // Bin 8 of a 256-point FFT at unit sample rate: frequency 8/256.
        let x: Vec<f64> = (0..4096)
            .map(|i| (2.0 * std::f64::consts::PI * 8.0 * i as f64 / 256.0).sin())
            .collect();
        let spec = stft(&x, &plan).unwrap();
        let (f_bins, frames) = (spec.shape()[1], spec.shape()[2]);
        let mid = frames / 2;
        let energy = |f: usize| {
            let re = spec.data()[f * frames + mid];
            let im = spec.data()[(f_bins + f) * frames + mid];
            re * re + im * im
        };
        let peak_bin = (0..f_bins).max_by(|&a, &b| energy(a).total_cmp(&energy(b))).unwrap();
        assert_eq!(peak_bin, 8);
        // The cosine analysis window leaks ~1/k², so check concentration, not nulls.
        let total: f64 = (0..f_bins).map(energy).sum();
        let near: f64 = (5..=11).map(energy).sum();
        assert!(near > 0.999 * total, "tone energy spread beyond its neighborhood");
    }

    #[test]
    fn multichannel_layout_interleaves_re_im_pairs() {
        let plan = StftPlan::new(64, 16).unwrap();
        let a: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin()).collect();
        let b: Vec<f64> = (0..200).map(|i| (i as f64 * 0.05).cos()).collect();
        let multi = stft_multi(&[a.clone(), b.clone()], &plan).unwrap();
        assert_eq!(multi.shape()[0], 4);
        let single_b = stft(&b, &plan).unwrap();
        let plane = multi.shape()[1] * multi.shape()[2];
        assert_eq!(&multi.data()[2 * plane..4 * plane], single_b.data());
        let back = istft_multi(&multi, &plan, 200).unwrap();
        for (x, y) in a.iter().zip(&back[0]) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn adjoint_matches_forward_inner_product() {
        // <A s, g> == <s, A* g> for random s, g certifies the adjoint pairing.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let (n_fft, hop, frames, out_len) = (64usize, 16usize, 9usize, 140usize);
        let f_bins = n_fft / 2 + 1;
        let s: Vec<f64> = (0..2 * f_bins * frames).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fwd = istft_core(&s, n_fft, hop, frames, out_len).unwrap();
        let adj = istft_adjoint_core(&g, n_fft, hop, frames).unwrap();
        let lhs: f64 = fwd.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = s.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}
