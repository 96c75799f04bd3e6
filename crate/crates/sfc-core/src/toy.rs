//! Synthetic separation scenes: a handful of spectrally disjoint generators
//! mixed with per-scene random gains and source dropping, deterministic
//! under a seed. Small enough to train a toy model in minutes.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfcError};
use crate::tensor::{Scalar, Tensor};

/// RMS every generator is normalized to before the per-scene gain.
const BASE_RMS: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    /// Pure tone with a random phase per scene.
    Tone { freq_hz: f64 },
    /// Noise synthesized directly on the FFT bins inside the band, so the
    /// spectrum is exactly zero elsewhere.
    NoiseBand { low_hz: f64, high_hz: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyMixSpec {
    pub sources: Vec<SourceKind>,
    pub sample_rate: usize,
    pub segment_len: usize,
    /// Per-scene gain drawn uniformly from this dB range.
    pub gain_db: (f64, f64),
    /// Per-scene probability that a source is silenced entirely.
    pub drop_prob: f64,
    pub seed: u64,
}

impl ToyMixSpec {
    /// The two-source smoke scene: a 300 Hz tone against 4–8 kHz noise at
    /// 16 kHz, spectrally disjoint by construction.
    pub fn two_band_default(seed: u64) -> Self {
        ToyMixSpec {
            sources: vec![
                SourceKind::Tone { freq_hz: 300.0 },
                SourceKind::NoiseBand { low_hz: 4000.0, high_hz: 8000.0 },
            ],
            sample_rate: 16_000,
            segment_len: 4096,
            gain_db: (-10.0, 10.0),
            drop_prob: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(SfcError::Config("toy mix needs at least one source".into()));
        }
        if self.segment_len == 0 || self.sample_rate == 0 {
            return Err(SfcError::Config("segment length and sample rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(SfcError::Config(format!("drop probability {} not in [0,1]", self.drop_prob)));
        }
        if self.gain_db.0 > self.gain_db.1 {
            return Err(SfcError::Config(format!("gain range {:?} is inverted", self.gain_db)));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for s in &self.sources {
            match *s {
                SourceKind::Tone { freq_hz } => {
                    if !(0.0 < freq_hz && freq_hz <= nyquist) {
                        return Err(SfcError::Config(format!("tone at {freq_hz} Hz is outside (0, {nyquist}]")));
                    }
                }
                SourceKind::NoiseBand { low_hz, high_hz } => {
                    if !(0.0 <= low_hz && low_hz < high_hz && high_hz <= nyquist) {
                        return Err(SfcError::Config(format!(
                            "noise band {low_hz}–{high_hz} Hz is not an increasing range within the Nyquist limit"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One drawn scene: post-gain stems (silenced stems are all-zero) and their
/// sum.
#[derive(Debug, Clone)]
pub struct ToyScene<T: Scalar> {
    pub mixture: Tensor<T>,
    pub sources: Vec<Tensor<T>>,
    pub active: Vec<bool>,
}

pub struct ToyMixer {
    pub spec: ToyMixSpec,
    rng: ChaCha12Rng,
}

impl ToyMixer {
    pub fn new(spec: ToyMixSpec) -> Result<Self> {
        spec.validate()?;
        let rng = ChaCha12Rng::seed_from_u64(spec.seed);
        Ok(ToyMixer { spec, rng })
    }

    /// Draw the next scene. Per source, in a fixed order: waveform draws,
    /// then gain, then the drop coin — so scene k is identical for every
    /// mixer built from the same spec.
    pub fn next_scene<T: Scalar>(&mut self) -> ToyScene<T> {
        let len = self.spec.segment_len;
        let mut sources = Vec::with_capacity(self.spec.sources.len());
        let mut active = Vec::with_capacity(self.spec.sources.len());
        let mut mixture = vec![0.0f64; len];
        for kind in &self.spec.sources {
            let mut wave = match *kind {
                SourceKind::Tone { freq_hz } => tone(len, self.spec.sample_rate, freq_hz, &mut self.rng),
                SourceKind::NoiseBand { low_hz, high_hz } => {
                    band_noise(len, self.spec.sample_rate, low_hz, high_hz, &mut self.rng)
                }
            };
            let db = self.rng.random_range(self.spec.gain_db.0..=self.spec.gain_db.1);
            let gain = 10f64.powf(db / 20.0);
            let dropped = self.rng.random_range(0.0..1.0) < self.spec.drop_prob;
            if dropped {
                wave.iter_mut().for_each(|v| *v = 0.0);
            } else {
                for (m, w) in mixture.iter_mut().zip(wave.iter_mut()) {
                    *w *= gain;
                    *m += *w;
                }
            }
            active.push(!dropped);
            sources.push(Tensor::from_vec(&[len], wave.iter().map(|v| T::f(*v)).collect()).expect("fixed shape"));
        }
        let mixture =
            Tensor::from_vec(&[len], mixture.iter().map(|v| T::f(*v)).collect()).expect("fixed shape");
        ToyScene { mixture, sources, active }
    }
}

fn tone(len: usize, sample_rate: usize, freq_hz: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let amp = BASE_RMS * std::f64::consts::SQRT_2;
    let w = std::f64::consts::TAU * freq_hz / sample_rate as f64;
    (0..len).map(|i| amp * (w * i as f64 + phase).sin()).collect()
}

/// Unit-phase-random noise on exactly the FFT bins covering [low, high] Hz,
/// inverse-transformed and normalized to [`BASE_RMS`].
fn band_noise(len: usize, sample_rate: usize, low_hz: f64, high_hz: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let hz_per_bin = sample_rate as f64 / len as f64;
    let lo = (low_hz / hz_per_bin).ceil() as usize;
    let hi = ((high_hz / hz_per_bin).floor() as usize).min(len / 2);
    let mut spec = vec![Complex::new(0.0f64, 0.0); len];
    for k in lo.max(1)..=hi {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let c = Complex::new(phase.cos(), phase.sin());
        spec[k] = c;
        if k != len - k {
            spec[len - k] = c.conj();
        }
    }
    FftPlanner::new().plan_fft_inverse(len).process(&mut spec);
    let mut wave: Vec<f64> = spec.iter().map(|c| c.re / len as f64).collect();
    let rms = (wave.iter().map(|v| v * v).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        wave.iter_mut().for_each(|v| *v *= BASE_RMS / rms);
    }
    wave
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectrum_energy(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(*v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
        buf[..=x.len() / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    #[test]
    fn identical_seeds_replay_identical_scenes() {
        let spec = ToyMixSpec::two_band_default(42);
        let mut a = ToyMixer::new(spec.clone()).unwrap();
        let mut b = ToyMixer::new(spec).unwrap();
        for _ in 0..5 {
            let sa = a.next_scene::<f64>();
            let sb = b.next_scene::<f64>();
            assert_eq!(sa.mixture.data(), sb.mixture.data());
            assert_eq!(sa.active, sb.active);
            for (x, y) in sa.sources.iter().zip(&sb.sources) {
                assert_eq!(x.data(), y.data());
            }
        }
    }

    #[test]
    fn mixture_is_exactly_the_stem_sum() {
        let mut mixer = ToyMixer::new(ToyMixSpec::two_band_default(7)).unwrap();
        for _ in 0..10 {
            let scene = mixer.next_scene::<f64>();
            for i in 0..scene.mixture.numel() {
                let sum: f64 = scene.sources.iter().map(|s| s.data()[i]).sum();
                assert_eq!(scene.mixture.data()[i], sum);
            }
        }
    }

    #[test]
    fn activity_rate_tracks_the_drop_probability() {
        let mut spec = ToyMixSpec::two_band_default(3);
        spec.segment_len = 64; // keep 10⁴ draws cheap
        let mut mixer = ToyMixer::new(spec).unwrap();
        let mut active = 0usize;
        let mut total = 0usize;
        for _ in 0..5_000 {
            let scene = mixer.next_scene::<f64>();
            active += scene.active.iter().filter(|a| **a).count();
            total += scene.active.len();
        }
        let rate = active as f64 / total as f64;
        assert!((rate - 0.9).abs() < 0.02, "activity rate {rate}");
    }

    #[test]
    fn default_sources_occupy_disjoint_bands() {
        let mut mixer = ToyMixer::new(ToyMixSpec::two_band_default(11)).unwrap();
        let scene = loop {
            let s = mixer.next_scene::<f64>();
            if s.active.iter().all(|a| *a) {
                break s;
            }
        };
        let sr = 16_000.0;
        let len = scene.mixture.numel();
        let hz = |bin: usize| bin as f64 * sr / len as f64;

        let tone = spectrum_energy(scene.sources[0].data());
        let tone_total: f64 = tone.iter().sum();
        let near: f64 = tone
            .iter()
            .enumerate()
            .filter(|(k, _)| (hz(*k) - 300.0).abs() <= 50.0)
            .map(|(_, e)| e)
            .sum();
        assert!(near / tone_total > 0.9, "tone leakage: {}", near / tone_total);

        let noise = spectrum_energy(scene.sources[1].data());
        let noise_total: f64 = noise.iter().sum();
        let below: f64 = noise.iter().enumerate().filter(|(k, _)| hz(*k) < 4000.0).map(|(_, e)| e).sum();
        assert!(below / noise_total < 1e-12, "noise below band: {}", below / noise_total);
    }

    #[test]
    fn active_stem_levels_stay_inside_the_gain_range() {
        let mut mixer = ToyMixer::new(ToyMixSpec::two_band_default(13)).unwrap();
        let (lo, hi) = (BASE_RMS * 10f64.powf(-0.5), BASE_RMS * 10f64.powf(0.5));
        for _ in 0..50 {
            let scene = mixer.next_scene::<f64>();
            for (s, active) in scene.sources.iter().zip(&scene.active) {
                let rms =
                    (s.data().iter().map(|v| v * v).sum::<f64>() / s.numel() as f64).sqrt();
                if *active {
                    assert!(rms >= lo * 0.999 && rms <= hi * 1.001, "rms {rms}");
                } else {
                    assert_eq!(rms, 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let base = ToyMixSpec::two_band_default(0);
        for breaker in [
            |s: &mut ToyMixSpec| s.sources.clear(),
            |s: &mut ToyMixSpec| s.drop_prob = 1.5,
            |s: &mut ToyMixSpec| s.segment_len = 0,
            |s: &mut ToyMixSpec| s.gain_db = (5.0, -5.0),
            |s: &mut ToyMixSpec| s.sources[0] = SourceKind::Tone { freq_hz: 9_000.0 },
            |s: &mut ToyMixSpec| {
                s.sources[1] = SourceKind::NoiseBand { low_hz: 5_000.0, high_hz: 4_000.0 }
            },
        ] {
            let mut spec = base.clone();
            breaker(&mut spec);
            assert!(ToyMixer::new(spec).is_err());
        }
    }
}
