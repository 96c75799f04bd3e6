//! Dual-path sequence core operating on compressed grids `(D, K, T)`.
//!
//! Each block runs two sub-blocks: one attends along the band axis within
//! every frame, the other along the time axis within every band. A sub-block
//! is pre-norm multi-head self-attention (no positional encoding) followed by
//! a pre-norm convolutional SwiGLU feed-forward, both residual.

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfcError};
use crate::nn::{ConvSwiGluFfn, MultiHeadAttention, Params, RmsNorm};
use crate::tensor::{Parameter, Scalar, Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparatorConfig {
    pub blocks: usize,
    pub feature_dim: usize,
    pub heads: usize,
    /// Hidden width of the convolutional feed-forward.
    pub conv_hidden: usize,
    pub kernel: usize,
}

impl SeparatorConfig {
    pub fn new(blocks: usize, feature_dim: usize, heads: usize, conv_hidden: usize) -> Self {
        SeparatorConfig { blocks, feature_dim, heads, conv_hidden, kernel: 8 }
    }

    pub fn small() -> Self {
        Self::new(4, 96, 4, 128)
    }

    pub fn medium() -> Self {
        Self::new(6, 128, 8, 192)
    }
}

#[derive(Debug, Clone)]
pub struct DualPathBlock<T: Scalar> {
    freq_norm1: RmsNorm<T>,
    freq_attn: MultiHeadAttention<T>,
    freq_norm2: RmsNorm<T>,
    freq_ffn: ConvSwiGluFfn<T>,
    time_norm1: RmsNorm<T>,
    time_attn: MultiHeadAttention<T>,
    time_norm2: RmsNorm<T>,
    time_ffn: ConvSwiGluFfn<T>,
}

/// x: (D, B, L) — attention along L for every batch row, residual.
fn attn_sublayer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    norm: &RmsNorm<T>,
    attn: &MultiHeadAttention<T>,
) -> Result<Var> {
    let n = norm.forward(tape, x)?;
    let a = attn.forward(tape, n)?;
    tape.add(x, a)
}

/// x: (D, B, L) — conv feed-forward along L for every batch row, residual.
fn ffn_sublayer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    norm: &RmsNorm<T>,
    ffn: &ConvSwiGluFfn<T>,
) -> Result<Var> {
    let n = norm.forward(tape, x)?;
    let rows = tape.shape(x)[1];
    let mut outs = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = tape.index(n, 1, i)?; // (D, L)
        outs.push(ffn.forward(tape, row)?);
    }
    let f = tape.stack_last(&outs)?; // (D, L, B)
    let f = tape.permute(f, &[0, 2, 1])?; // (D, B, L)
    tape.add(x, f)
}

impl<T: Scalar> DualPathBlock<T> {
    fn new(name: &str, cfg: &SeparatorConfig, rng: &mut ChaCha12Rng) -> Self {
        let d = cfg.feature_dim;
        DualPathBlock {
            freq_norm1: RmsNorm::new(&format!("{name}.freq.norm1"), d),
            freq_attn: MultiHeadAttention::new(&format!("{name}.freq.attn"), d, cfg.heads, rng),
            freq_norm2: RmsNorm::new(&format!("{name}.freq.norm2"), d),
            freq_ffn: ConvSwiGluFfn::new(&format!("{name}.freq.ffn"), d, cfg.conv_hidden, cfg.kernel, rng),
            time_norm1: RmsNorm::new(&format!("{name}.time.norm1"), d),
            time_attn: MultiHeadAttention::new(&format!("{name}.time.attn"), d, cfg.heads, rng),
            time_norm2: RmsNorm::new(&format!("{name}.time.norm2"), d),
            time_ffn: ConvSwiGluFfn::new(&format!("{name}.time.ffn"), d, cfg.conv_hidden, cfg.kernel, rng),
        }
    }

    /// Band-axis sub-block: every frame is an independent K-length sequence.
    fn freq(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let zf = tape.permute(z, &[0, 2, 1])?; // (D, T, K)
        let zf = attn_sublayer(tape, zf, &self.freq_norm1, &self.freq_attn)?;
        let zf = ffn_sublayer(tape, zf, &self.freq_norm2, &self.freq_ffn)?;
        tape.permute(zf, &[0, 2, 1])
    }

    /// Time-axis sub-block: every band is an independent T-length sequence.
    fn time(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let zt = attn_sublayer(tape, z, &self.time_norm1, &self.time_attn)?; // (D, K, T)
        ffn_sublayer(tape, zt, &self.time_norm2, &self.time_ffn)
    }

    pub fn forward(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let z = self.freq(tape, z)?;
        self.time(tape, z)
    }
}

impl<T: Scalar> Params<T> for DualPathBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.freq_norm1.visit(f);
        self.freq_attn.visit(f);
        self.freq_norm2.visit(f);
        self.freq_ffn.visit(f);
        self.time_norm1.visit(f);
        self.time_attn.visit(f);
        self.time_norm2.visit(f);
        self.time_ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.freq_norm1.visit_mut(f);
        self.freq_attn.visit_mut(f);
        self.freq_norm2.visit_mut(f);
        self.freq_ffn.visit_mut(f);
        self.time_norm1.visit_mut(f);
        self.time_attn.visit_mut(f);
        self.time_norm2.visit_mut(f);
        self.time_ffn.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct Separator<T: Scalar> {
    pub cfg: SeparatorConfig,
    blocks: Vec<DualPathBlock<T>>,
}

impl<T: Scalar> Separator<T> {
    pub fn new(cfg: SeparatorConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        if cfg.feature_dim % cfg.heads != 0 {
            return Err(SfcError::Config(format!(
                "feature dim {} must divide into {} heads",
                cfg.feature_dim, cfg.heads
            )));
        }
        if cfg.blocks == 0 || cfg.kernel == 0 {
            return Err(SfcError::Config("separator needs at least one block and kernel ≥ 1".into()));
        }
        let blocks = (0..cfg.blocks)
            .map(|i| DualPathBlock::new(&format!("sep.b{i}"), &cfg, rng))
            .collect();
        Ok(Separator { cfg, blocks })
    }

    /// `(D, K, T) -> (D, K, T)`.
    pub fn forward(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.feature_dim {
            return Err(SfcError::shape("separator", format!("input {shape:?}")));
        }
        let mut z = z;
        for b in &self.blocks {
            z = b.forward(tape, z)?;
        }
        Ok(z)
    }
}

impl<T: Scalar> Params<T> for Separator<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        for b in &self.blocks {
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::load_params;
    use crate::tensor::{grad_check, GradCheckOpts, Tensor};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn tiny() -> SeparatorConfig {
        SeparatorConfig::new(1, 4, 2, 4)
    }

    #[test]
    fn presets_match_published_configurations() {
        let s = SeparatorConfig::small();
        assert_eq!((s.blocks, s.feature_dim, s.heads, s.conv_hidden, s.kernel), (4, 96, 4, 128, 8));
        let m = SeparatorConfig::medium();
        assert_eq!((m.blocks, m.feature_dim, m.heads, m.conv_hidden, m.kernel), (6, 128, 8, 192, 8));
    }

    #[test]
    fn shape_is_preserved_through_stacked_blocks() {
        let cfg = SeparatorConfig::new(2, 8, 2, 6);
        let sep = Separator::<f64>::new(cfg, &mut rng(1)).unwrap();
        let mut tape = Tape::<f64>::new();
        let z = tape.input(&Tensor::uniform(&[8, 5, 7], -1.0, 1.0, &mut rng(2))).unwrap();
        let out = sep.forward(&mut tape, z).unwrap();
        assert_eq!(tape.shape(out), &[8, 5, 7]);
    }

    #[test]
    fn frequency_sub_block_is_frame_local() {
        let sep = Separator::<f64>::new(tiny(), &mut rng(3)).unwrap();
        let mut r = rng(4);
        let z = Tensor::<f64>::uniform(&[4, 3, 3], -1.0, 1.0, &mut r);
        let mut z2 = z.clone();
        for d in 0..4 {
            for k in 0..3 {
                z2.set(&[d, k, 1], z2.at(&[d, k, 1]) + 0.5);
            }
        }
        let run = |t: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let v = tape.input(t).unwrap();
            let y = sep.blocks[0].freq(&mut tape, v).unwrap();
            tape.tensor(y)
        };
        let (y1, y2) = (run(&z), run(&z2));
        for d in 0..4 {
            for k in 0..3 {
                assert_eq!(y1.at(&[d, k, 0]), y2.at(&[d, k, 0]));
                assert_eq!(y1.at(&[d, k, 2]), y2.at(&[d, k, 2]));
            }
        }
        assert_ne!(y1.at(&[0, 0, 1]), y2.at(&[0, 0, 1]));
    }

    #[test]
    fn temporal_sub_block_is_band_local() {
        let sep = Separator::<f64>::new(tiny(), &mut rng(5)).unwrap();
        let mut r = rng(6);
        let z = Tensor::<f64>::uniform(&[4, 3, 3], -1.0, 1.0, &mut r);
        let mut z2 = z.clone();
        for d in 0..4 {
            for t in 0..3 {
                z2.set(&[d, 1, t], z2.at(&[d, 1, t]) - 0.4);
            }
        }
        let run = |t: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let v = tape.input(t).unwrap();
            let y = sep.blocks[0].time(&mut tape, v).unwrap();
            tape.tensor(y)
        };
        let (y1, y2) = (run(&z), run(&z2));
        for d in 0..4 {
            for t in 0..3 {
                assert_eq!(y1.at(&[d, 0, t]), y2.at(&[d, 0, t]));
                assert_eq!(y1.at(&[d, 2, t]), y2.at(&[d, 2, t]));
            }
        }
        assert_ne!(y1.at(&[0, 1, 0]), y2.at(&[0, 1, 0]));
    }

    #[test]
    fn attention_sublayer_commutes_with_band_permutation() {
        // No positional encoding: permuting the band axis before the
        // attention half must equal permuting after. The conv feed-forward
        // half reads a band neighborhood, so the full block does not commute.
        let sep = Separator::<f64>::new(tiny(), &mut rng(7)).unwrap();
        let block = &sep.blocks[0];
        let perm = [3usize, 0, 4, 2, 1];
        let z = Tensor::<f64>::uniform(&[4, 2, 5], -1.0, 1.0, &mut rng(8)); // (D, T, K)
        let mut tape = Tape::<f64>::new();
        let v = tape.input(&z).unwrap();
        let y = attn_sublayer(&mut tape, v, &block.freq_norm1, &block.freq_attn).unwrap();
        let y_then_p = tape.gather_last(y, &perm).unwrap();
        let vp = tape.gather_last(v, &perm).unwrap();
        let p_then_y = attn_sublayer(&mut tape, vp, &block.freq_norm1, &block.freq_attn).unwrap();
        let a = tape.tensor(y_then_p);
        let b = tape.tensor(p_then_y);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        assert!(Separator::<f64>::new(SeparatorConfig::new(1, 5, 2, 4), &mut rng(9)).is_err());
        assert!(Separator::<f64>::new(SeparatorConfig::new(0, 4, 2, 4), &mut rng(9)).is_err());
    }

    #[test]
    fn gradients_check_through_one_block() {
        let sep = Separator::<f64>::new(tiny(), &mut rng(10)).unwrap();
        let params: Vec<_> = sep.collect_params().into_iter().cloned().collect();
        let z = Tensor::uniform(&[4, 3, 2], -1.0, 1.0, &mut rng(11));
        let report = grad_check(
            |tape, ps| {
                let mut m = sep.clone();
                load_params(&mut m, ps)?;
                let v = tape.input(&z)?;
                let y = m.forward(tape, v)?;
                tape.sum_all(y)
            },
            &params,
            &GradCheckOpts { tol: 1e-4, ..GradCheckOpts::default() },
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
