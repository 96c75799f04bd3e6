//! Band-split baseline codec.
//!
//! Per-band weights everywhere: the encoder normalizes and projects each
//! band's flattened channel×bin block to the feature dimension, the decoder
//! expands each band's feature vector back to per-source mask values through
//! a tanh MLP with a gated output. Parameter count therefore scales with the
//! summed band widths, which is what the compression codecs remove.
//!
//! Encoder band k: RMS norm (gains over `2M·|G_k|`) → linear to D with bias,
//! i.e. `(2M·|G_k|)·(D + 1) + D` weights per band. Decoder band k: RMS norm
//! (D) → D→4D tanh → (hidden_layers − 1 further 4D→4D tanh) → 4D→2·N·2M·|G_k|
//! → GLU, halving to the mask block `(N, 2M, |G_k|, T)`. Bands are merged by
//! unweighted averaging wherever they overlap; no activation is applied to
//! the merged masks.

use serde::{Deserialize, Serialize};

use super::{Codec, EncodeAux, Encoded};
use crate::bands::BandConfig;
use crate::error::{Result, SfcError};
use crate::nn::{glu0, Linear, Params, RmsNorm};
use crate::tensor::{Parameter, Scalar, Tape, Var};
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BsConfig {
    pub bands: BandConfig,
    /// Stacked real/imaginary input channels (2M for M audio channels).
    pub in_channels: usize,
    /// Compressed feature dimension D.
    pub feature_dim: usize,
    pub num_sources: usize,
    /// Decoder tanh layers (≥ 1); the first maps D→4D, the rest 4D→4D.
    pub hidden_layers: usize,
}

#[derive(Debug, Clone)]
pub struct BsCodec<T: Scalar> {
    cfg: BsConfig,
    enc_norm: Vec<RmsNorm<T>>,
    enc_proj: Vec<Linear<T>>,
    dec_norm: Vec<RmsNorm<T>>,
    dec_mlp: Vec<Vec<Linear<T>>>,
    dec_out: Vec<Linear<T>>,
}

impl<T: Scalar> BsCodec<T> {
    pub fn new(cfg: BsConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.feature_dim == 0 || cfg.num_sources == 0 {
            return Err(SfcError::Config("band-split codec needs nonzero dims".into()));
        }
        if cfg.hidden_layers == 0 {
            return Err(SfcError::Config("decoder needs at least one hidden layer".into()));
        }
        let d = cfg.feature_dim;
        let mut enc_norm = Vec::new();
        let mut enc_proj = Vec::new();
        let mut dec_norm = Vec::new();
        let mut dec_mlp = Vec::new();
        let mut dec_out = Vec::new();
        for (k, band) in cfg.bands.bands.iter().enumerate() {
            let block = cfg.in_channels * band.width();
            enc_norm.push(RmsNorm::new(&format!("bs.enc.b{k}.norm"), block));
            enc_proj.push(Linear::new(&format!("bs.enc.b{k}.proj"), block, d, true, rng));
            dec_norm.push(RmsNorm::new(&format!("bs.dec.b{k}.norm"), d));
            let mut mlp = vec![Linear::new(&format!("bs.dec.b{k}.l0"), d, 4 * d, true, rng)];
            for i in 1..cfg.hidden_layers {
                mlp.push(Linear::new(&format!("bs.dec.b{k}.l{i}"), 4 * d, 4 * d, true, rng));
            }
            dec_mlp.push(mlp);
            let mask_block = cfg.num_sources * block;
            dec_out.push(Linear::new(&format!("bs.dec.b{k}.out"), 4 * d, 2 * mask_block, true, rng));
        }
        Ok(BsCodec { cfg, enc_norm, enc_proj, dec_norm, dec_mlp, dec_out })
    }

    pub fn config(&self) -> &BsConfig {
        &self.cfg
    }
}

impl<T: Scalar> Params<T> for BsCodec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        for k in 0..self.cfg.bands.k() {
            self.enc_norm[k].visit(f);
            self.enc_proj[k].visit(f);
            self.dec_norm[k].visit(f);
            for l in &self.dec_mlp[k] {
                l.visit(f);
            }
            self.dec_out[k].visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for k in 0..self.cfg.bands.k() {
            self.enc_norm[k].visit_mut(f);
            self.enc_proj[k].visit_mut(f);
            self.dec_norm[k].visit_mut(f);
            for l in &mut self.dec_mlp[k] {
                l.visit_mut(f);
            }
            self.dec_out[k].visit_mut(f);
        }
    }
}

impl<T: Scalar> Codec<T> for BsCodec<T> {
    fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Encoded> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels || shape[1] != self.cfg.bands.f_bins
        {
            return Err(SfcError::shape("bs.encode", format!("input {shape:?}")));
        }
        let t_frames = shape[2];
        let mut per_band = Vec::with_capacity(self.cfg.bands.k());
        for (k, band) in self.cfg.bands.bands.iter().enumerate() {
            let xs = tape.narrow(x, 1, band.g_s, band.width())?;
            let flat = tape.reshape(xs, &[self.cfg.in_channels * band.width(), t_frames])?;
            let normed = self.enc_norm[k].forward(tape, flat)?;
            per_band.push(self.enc_proj[k].forward(tape, normed)?);
        }
        let stacked = tape.stack_last(&per_band)?; // (D, T, K)
        let z = tape.permute(stacked, &[0, 2, 1])?; // (D, K, T)
        Ok(Encoded { z, aux: EncodeAux::None })
    }

    fn decode(&self, tape: &mut Tape<T>, z: Var, _enc: &Encoded) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        let k_bands = self.cfg.bands.k();
        if shape.len() != 3 || shape[0] != self.cfg.feature_dim || shape[1] != k_bands {
            return Err(SfcError::shape("bs.decode", format!("features {shape:?}")));
        }
        let t_frames = shape[2];
        let (n, c) = (self.cfg.num_sources, self.cfg.in_channels);
        let mut per_band = Vec::with_capacity(k_bands);
        let mut extents = Vec::with_capacity(k_bands);
        for (k, band) in self.cfg.bands.bands.iter().enumerate() {
            let zk = tape.index(z, 1, k)?; // (D, T)
            let mut h = self.dec_norm[k].forward(tape, zk)?;
            for l in &self.dec_mlp[k] {
                h = l.forward(tape, h)?;
                h = tape.tanh(h)?;
            }
            let expanded = self.dec_out[k].forward(tape, h)?;
            let gated = glu0(tape, expanded)?;
            per_band.push(tape.reshape(gated, &[n * c, band.width(), t_frames])?);
            extents.push((band.g_s, band.g_e));
        }
        let merged = tape.band_merge(&per_band, &extents, self.cfg.bands.f_bins)?;
        tape.reshape(merged, &[n, c, self.cfg.bands.f_bins, t_frames])
    }

    fn feature_dim(&self) -> usize {
        self.cfg.feature_dim
    }
    fn num_bands(&self) -> usize {
        self.cfg.bands.k()
    }
    fn f_bins(&self) -> usize {
        self.cfg.bands.f_bins
    }
    fn num_sources(&self) -> usize {
        self.cfg.num_sources
    }
    fn in_channels(&self) -> usize {
        self.cfg.in_channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bands::{gen_full, gen_uniform, Band, BandConfig};
    use crate::nn::load_params;
    use crate::tensor::{grad_check, GradCheckOpts, Tape, Tensor};
    use rand::SeedableRng;

    fn codec(bands: BandConfig, c: usize, d: usize, n: usize, h: usize) -> BsCodec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        BsCodec::new(
            BsConfig { bands, in_channels: c, feature_dim: d, num_sources: n, hidden_layers: h },
            &mut rng,
        )
        .unwrap()
    }

    fn count_with_prefix(codec: &BsCodec<f64>, prefix: &str) -> usize {
        let mut n = 0;
        codec.visit(&mut |p| {
            if p.name.starts_with(prefix) {
                n += p.numel();
            }
        });
        n
    }

    #[test]
    fn encoder_count_single_full_band_is_296() {
        // One band of 16 bins, 2 channels, D=8: norm 32 + weights 256 + bias 8.
        let bands = BandConfig::new("one", 16, vec![Band::new(0, 16)]).unwrap();
        let c = codec(bands, 2, 8, 1, 1);
        assert_eq!(count_with_prefix(&c, "bs.enc."), 296);
    }

    #[test]
    fn encoder_count_matches_closed_form() {
        let bands = gen_uniform(33, 5).unwrap();
        let (cc, d) = (4usize, 12usize);
        let c = codec(bands.clone(), cc, d, 2, 2);
        let want: usize =
            bands.bands.iter().map(|b| cc * b.width() * (d + 1) + d).sum();
        assert_eq!(count_with_prefix(&c, "bs.enc."), want);
        // Decoder: norm D + (D·4D+4D) + (h−1)(16D²+4D) + (4D·2S + 2S), S=N·2M·|G|.
        let want_dec: usize = bands
            .bands
            .iter()
            .map(|b| {
                let s = 2 * 2 * cc * b.width();
                d + (4 * d * d + 4 * d) + (16 * d * d + 4 * d) + (4 * d * s + s)
            })
            .sum();
        assert_eq!(count_with_prefix(&c, "bs.dec."), want_dec);
    }

    #[test]
    fn encode_shape_and_band_locality() {
        let bands = gen_uniform(12, 3).unwrap();
        let c = codec(bands.clone(), 2, 5, 1, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[2, 12, 3], -1.0, 1.0, &mut rng);
        let mut perturbed = x.clone();
        // Poke a bin of band 2 only.
        perturbed.set(&[1, 9, 2], 7.5);

        let run = |inp: &Tensor<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let xv = tape.input(inp).unwrap();
            let enc = c.encode(&mut tape, xv).unwrap();
            tape.tensor(enc.z)
        };
        let (za, zb) = (run(&x), run(&perturbed));
        assert_eq!(za.shape(), &[5, 3, 3]);
        for k in 0..3 {
            for dd in 0..5 {
                for t in 0..3 {
                    let (a, b) = (za.at(&[dd, k, t]), zb.at(&[dd, k, t]));
                    if k == 2 {
                        continue; // owning band may move
                    }
                    assert_eq!(a, b, "band {k} leaked");
                }
            }
        }
        assert_ne!(za.at(&[0, 2, 2]), zb.at(&[0, 2, 2]));
    }

    #[test]
    fn decode_band_locality_through_overlap_stencil() {
        // Overlapping stencil: perturbing z_k may only move output bins the
        // band's extent covers.
        let bands = BandConfig::new(
            "st",
            10,
            vec![Band::new(0, 5), Band::new(3, 8), Band::new(8, 10)],
        )
        .unwrap();
        let c = codec(bands.clone(), 2, 4, 1, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z = Tensor::uniform(&[4, 3, 2], -1.0, 1.0, &mut rng);
        let mut zp = z.clone();
        zp.set(&[1, 1, 0], 3.0); // band 1 covers bins [3, 8)

        let run = |inp: &Tensor<f64>| {
            let mut tape: Tape<f64> = Tape::new();
            let zv = tape.input(inp).unwrap();
            let enc = Encoded { z: zv, aux: EncodeAux::None };
            let m = c.decode(&mut tape, zv, &enc).unwrap();
            tape.tensor(m)
        };
        let (ma, mb) = (run(&z), run(&zp));
        assert_eq!(ma.shape(), &[1, 2, 10, 2]);
        let mut any_moved = false;
        for ch in 0..2 {
            for f in 0..10 {
                for t in 0..2 {
                    let (a, b) = (ma.at(&[0, ch, f, t]), mb.at(&[0, ch, f, t]));
                    if (3..8).contains(&f) {
                        any_moved |= a != b;
                    } else {
                        assert_eq!(a, b, "bin {f} outside band 1 moved");
                    }
                }
            }
        }
        assert!(any_moved);
    }

    #[test]
    fn overlap_merge_averages_band_outputs() {
        // Full split, two identical-extent bands: rig both decoders to emit
        // constants a and b; every merged bin must read (a+b)/2.
        let bands = gen_full(6, 2).unwrap();
        let mut c = codec(bands, 2, 3, 1, 1);
        let consts = [0.8, -0.3];
        c.visit_mut(&mut |p| {
            for v in p.value.data_mut() {
                *v = 0.0;
            }
            for (k, target) in consts.iter().enumerate() {
                if p.name == format!("bs.dec.b{k}.out.b") {
                    // Value half = 2·target, gate half 0 → glu emits target.
                    let half = p.value.numel() / 2;
                    for v in &mut p.value.data_mut()[..half] {
                        *v = 2.0 * target;
                    }
                }
            }
        });
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.input(&Tensor::zeros(&[3, 2, 2])).unwrap();
        let enc = Encoded { z, aux: EncodeAux::None };
        let m = c.decode(&mut tape, z, &enc).unwrap();
        let got = tape.tensor(m);
        let want = (consts[0] + consts[1]) / 2.0;
        for v in got.data() {
            assert!((v - want).abs() < 1e-12, "{v} vs {want}");
        }
    }

    #[test]
    fn fresh_codec_maps_zero_input_to_zero_masks() {
        let bands = gen_uniform(8, 2).unwrap();
        let c = codec(bands, 2, 4, 2, 1);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(&Tensor::zeros(&[2, 8, 3])).unwrap();
        let enc = c.encode(&mut tape, x).unwrap();
        let m = c.decode(&mut tape, enc.z, &enc).unwrap();
        assert_eq!(tape.shape(m), &[2, 2, 8, 3]);
        assert!(tape.tensor(enc.z).data().iter().all(|&v| v == 0.0));
        assert!(tape.tensor(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn roundtrip_gradients_check_on_tiny_codec() {
        let bands = gen_uniform(6, 2).unwrap();
        let c = codec(bands, 2, 3, 1, 2);
        let params: Vec<_> = c.collect_params().into_iter().cloned().collect();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = Tensor::uniform(&[2, 6, 2], -1.0, 1.0, &mut rng);
        let report = grad_check(
            |tape, ps| {
                let mut m = c.clone();
                load_params(&mut m, ps)?;
                let xv = tape.input(&x)?;
                let enc = m.encode(tape, xv)?;
                let masks = m.decode(tape, enc.z, &enc)?;
                tape.sum_all(masks)
            },
            &params,
            &GradCheckOpts::default(),
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
