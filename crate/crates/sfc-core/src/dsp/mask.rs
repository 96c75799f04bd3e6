//! Complex ratio masking outside the autodiff tape (inference path).

use crate::error::{Result, SfcError};
use crate::tensor::{numel, Scalar, Tensor};

/// Apply complex masks to a mixture spectrogram.
///
/// `mask`: (..., 2M, F, T) — any leading axes (typically the source axis N);
/// `spec`: (2M, F, T). Per channel pair, (a+bi)(c+di) with a,b from the mask
/// and c,d from the mixture.
pub fn apply_mask<T: Scalar>(mask: &Tensor<T>, spec: &Tensor<T>) -> Result<Tensor<T>> {
    let (sm, sx) = (mask.shape(), spec.shape());
    if sx.len() != 3 || sm.len() < 3 || sm[sm.len() - 3..] != *sx || sx[0] % 2 != 0 {
        return Err(SfcError::shape("apply_mask", format!("mask {sm:?} on spec {sx:?}")));
    }
    let (c, plane) = (sx[0], sx[1] * sx[2]);
    let batch = numel(sm) / (c * plane);
    let (mv, xv) = (mask.data(), spec.data());
    let mut out = vec![T::zero(); mv.len()];
    for q in 0..batch {
        let base = q * c * plane;
        for p in 0..c / 2 {
            let ro = base + 2 * p * plane;
            let io = base + (2 * p + 1) * plane;
            let xr = 2 * p * plane;
            let xi = (2 * p + 1) * plane;
            for e in 0..plane {
                let (mr, mi) = (mv[ro + e], mv[io + e]);
                let (cr, ci) = (xv[xr + e], xv[xi + e]);
                out[ro + e] = mr * cr - mi * ci;
                out[io + e] = mr * ci + mi * cr;
            }
        }
    }
    Tensor::from_vec(sm, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_mask_is_identity_and_i_mask_rotates() {
        // spec: one channel pair, F=1, T=1, value 3+4i.
        let spec = Tensor::from_vec(&[2, 1, 1], vec![3.0f64, 4.0]).unwrap();
        let unit = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        let out = apply_mask(&unit, &spec).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
        // Mask i: (0+1i)(3+4i) = -4+3i.
        let rot = Tensor::from_vec(&[1, 2, 1, 1], vec![0.0, 1.0]).unwrap();
        let out = apply_mask(&rot, &spec).unwrap();
        assert_eq!(out.data(), &[-4.0, 3.0]);
    }
}
