//! Distance-based positional bias for band-aware cross-attention.
//!
//! Row k scores every frequency bin by its position relative to band k. The
//! band edges are treated inclusively (start bin `g_s`, end bin `g_e - 1`),
//! and the in-band divisor is the inclusive edge distance `(g_e - 1) - g_s`,
//! matching the source formula's width convention:
//!
//! * inside the band: `|c - f| / ((g_e - 1) - g_s)` with center
//!   `c = (g_s + g_e - 1) / 2` — in `[0, 0.5]`, optionally negated;
//! * past the band end: `(g_e - 1) - f` (strictly negative);
//! * before the band start: `f - g_s` (strictly negative).
//!
//! A width-1 band makes the in-band case 0/0; the zero numerator wins (the
//! center scores 0 in every band).

use crate::bands::BandConfig;
use crate::error::Result;
use crate::nn::Params;
use crate::tensor::{Parameter, Scalar, Tape, Tensor, Var};

/// The encoder-direction bias matrix `(K, F)`.
pub fn build_pos_bias<T: Scalar>(bands: &BandConfig, negate_in_band: bool) -> Tensor<T> {
    let (k, f_bins) = (bands.k(), bands.f_bins);
    let mut data = Vec::with_capacity(k * f_bins);
    for band in &bands.bands {
        let (s, e) = (band.g_s as f64, band.g_e as f64);
        let center = (s + e - 1.0) / 2.0;
        let width = e - 1.0 - s; // inclusive edge distance
        for f in 0..f_bins {
            let f = f as f64;
            let v = if f > e - 1.0 {
                (e - 1.0) - f
            } else if f < s {
                f - s
            } else if (center - f).abs() == 0.0 {
                0.0
            } else {
                let inside = (center - f).abs() / width;
                if negate_in_band {
                    -inside
                } else {
                    inside
                }
            };
            data.push(T::f(v));
        }
    }
    Tensor::from_vec(&[k, f_bins], data).expect("bias shape")
}

/// Per-head bias matrices and slopes for one attention direction. Either
/// piece may be learnable (a parameter) or fixed (a buffer that still enters
/// the model signature).
#[derive(Debug, Clone)]
pub struct PosBias<T: Scalar> {
    pub p: Parameter<T>,
    pub gamma: Parameter<T>,
    pub learn_p: bool,
    pub learn_gamma: bool,
}

impl<T: Scalar> PosBias<T> {
    /// `base`: (L_q, L_k) bias replicated across `heads`; γ starts at 1.
    pub fn new(name: &str, base: &Tensor<T>, heads: usize, learn_p: bool, learn_gamma: bool) -> Self {
        let (lq, lk) = (base.shape()[0], base.shape()[1]);
        let mut data = Vec::with_capacity(heads * lq * lk);
        for _ in 0..heads {
            data.extend_from_slice(base.data());
        }
        PosBias {
            p: Parameter::new(
                format!("{name}.p"),
                Tensor::from_vec(&[heads, lq, lk], data).expect("bias shape"),
            ),
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[heads], T::one())),
            learn_p,
            learn_gamma,
        }
    }

    /// Transposed copy (decoder direction shares the encoder's initial values).
    pub fn transposed(&self, name: &str) -> Self {
        let s = self.p.value.shape();
        let (h, lq, lk) = (s[0], s[1], s[2]);
        let src = self.p.value.data();
        let mut data = vec![T::zero(); h * lk * lq];
        for hh in 0..h {
            for i in 0..lq {
                for j in 0..lk {
                    data[(hh * lk + j) * lq + i] = src[(hh * lq + i) * lk + j];
                }
            }
        }
        PosBias {
            p: Parameter::new(
                format!("{name}.p"),
                Tensor::from_vec(&[h, lk, lq], data).expect("bias shape"),
            ),
            gamma: Parameter::new(format!("{name}.gamma"), self.gamma.value.clone()),
            learn_p: self.learn_p,
            learn_gamma: self.learn_gamma,
        }
    }

    /// Put P and γ on the tape, each as a parameter or a plain input per its
    /// learnability flag.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<(Var, Var)> {
        let p = if self.learn_p { tape.param(&self.p)? } else { tape.input(&self.p.value)? };
        let g = if self.learn_gamma {
            tape.param(&self.gamma)?
        } else {
            tape.input(&self.gamma.value)?
        };
        Ok((p, g))
    }

    /// Fixed pieces, for signature hashing.
    pub fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        if !self.learn_p {
            out.push((self.p.name.clone(), self.p.value.clone()));
        }
        if !self.learn_gamma {
            out.push((self.gamma.name.clone(), self.gamma.value.clone()));
        }
        out
    }
}

impl<T: Scalar> Params<T> for PosBias<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        if self.learn_p {
            f(&self.p);
        }
        if self.learn_gamma {
            f(&self.gamma);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        if self.learn_p {
            f(&mut self.p);
        }
        if self.learn_gamma {
            f(&mut self.gamma);
        }
    }
}
