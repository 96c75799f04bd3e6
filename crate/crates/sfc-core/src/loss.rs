//! Training loss (negative thresholded SNR with a silent-reference branch)
//! and the spectrogram-domain SNR used to score mask roundtrips.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SfcError};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Keeps the silent-branch log argument positive when the mixture itself is
/// silent (τ·‖x‖² underflows to zero).
const SILENT_FLOOR: f64 = 1e-30;

/// Hard ceiling for spectrogram SNR when the residual underflows.
pub const SPECSNR_CAP: f64 = 150.0;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Soft threshold τ; caps the per-source SNR at 10·log10(1/τ).
    pub tau: f64,
    /// Weight on the silent-reference branch.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 1e-3, alpha: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(SfcError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) {
            return Err(SfcError::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Negative thresholded SNR of one estimated source against its reference.
///
/// Active reference (`‖y‖² > 0`):  −10·log10( ‖y‖² / (‖y−ŷ‖² + τ‖y‖²) ).
/// Silent reference:               −α·10·log10( 1 / (‖ŷ‖² + τ‖x‖²) ),
/// where `x` is the mixture, so the model is pushed toward outputting
/// silence scaled to the scene. The branch is chosen from the reference
/// tensor while building the graph; the result is differentiable in `y_hat`.
pub fn snr_loss<T: Scalar>(
    tape: &mut Tape<T>,
    y_hat: Var,
    y: &Tensor<T>,
    mix: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if tape.shape(y_hat) != y.shape() {
        return Err(SfcError::Shape {
            op: "snr_loss",
            detail: format!("estimate {:?} vs reference {:?}", tape.shape(y_hat), y.shape()),
        });
    }
    if mix.shape() != y.shape() {
        return Err(SfcError::Shape {
            op: "snr_loss",
            detail: format!("mixture {:?} vs reference {:?}", mix.shape(), y.shape()),
        });
    }
    let ref_energy: f64 = y.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    let db = 10.0 / std::f64::consts::LN_10;
    if ref_energy > 0.0 {
        let y_in = tape.input(y)?;
        let d = tape.sub(y_in, y_hat)?;
        let sq = tape.mul(d, d)?;
        let err = tape.sum_all(sq)?;
        let arg = tape.add_scalar(err, T::f(cfg.tau * ref_energy))?;
        let l = tape.log(arg)?;
        let scaled = tape.mul_scalar(l, T::f(db))?;
        tape.add_scalar(scaled, T::f(-db * ref_energy.ln()))
    } else {
        let mix_energy: f64 = mix.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let sq = tape.mul(y_hat, y_hat)?;
        let est = tape.sum_all(sq)?;
        let arg = tape.add_scalar(est, T::f((cfg.tau * mix_energy).max(SILENT_FLOOR)))?;
        let l = tape.log(arg)?;
        tape.mul_scalar(l, T::f(cfg.alpha * db))
    }
}

/// Spectrogram SNR in dB between same-shape magnitude spectrograms:
/// `10·log10( Σ Y² / Σ (Y − Ŷ)² )`, summed over every bin and channel,
/// capped at [`SPECSNR_CAP`] when the residual underflows.
pub fn specsnr<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    if y.shape() != y_hat.shape() {
        return Err(SfcError::Shape {
            op: "specsnr",
            detail: format!("reference {:?} vs estimate {:?}", y.shape(), y_hat.shape()),
        });
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, b) in y.data().iter().zip(y_hat.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        num += a * a;
        den += (a - b) * (a - b);
    }
    if num <= 0.0 {
        return Err(SfcError::Metric("spectrogram SNR needs a nonzero reference".into()));
    }
    if den <= 0.0 {
        return Ok(SPECSNR_CAP);
    }
    Ok((10.0 * (num / den).log10()).min(SPECSNR_CAP))
}
