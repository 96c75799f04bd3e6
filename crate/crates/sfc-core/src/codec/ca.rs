//! Cross-attention codec: K learnable (or input-derived) queries attend over
//! the F frequency bins per frame, a distance-based positional bias steering
//! query k toward band k. The decoder mirrors this with F queries over the K
//! compressed slots and the transposed bias. Parameter count is independent
//! of the band widths.
//!
//! Per frame: `softmax(QᵀK/√d + γ·P [+ mask]) V`, heads concatenated, no
//! projection and no residual after attention; one SwiGLU FFN (inner `2D'`)
//! with residual follows. Convolutions around the attention have kernel
//! `(3, 1)` — 3 across frequency/band slots, 1 across time — keeping every
//! frame independent of its neighbors.

use serde::{Deserialize, Serialize};

use super::pos_bias::{build_pos_bias, PosBias};
use super::{Codec, EncodeAux, Encoded, PosBiasInit, QueryMode, ScaleMode};
use crate::bands::BandConfig;
use crate::error::{Result, SfcError};
use crate::nn::{Conv2d, Deconv2d, Linear, Params, RmsNorm, SwiGluFfn};
use crate::tensor::{Parameter, Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha12Rng;

/// Multi-head cross-attention with an additive per-head bias.
///
/// `q (D', L_q)`, `k`/`v (D', L_k)`, `p (H, L_q, L_k)`, `gamma (H,)`,
/// optional additive `mask (L_q, L_k)`. Returns the attended output
/// `(D', L_q)` and the post-softmax weights `(H, L_q, L_k)`.
pub fn cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    p: Var,
    gamma: Var,
    mask: Option<Var>,
    scale_mode: ScaleMode,
) -> Result<(Var, Var)> {
    let d = tape.shape(q)[0];
    let heads = tape.shape(p)[0];
    if d == 0 || heads == 0 || d % heads != 0 {
        return Err(SfcError::shape(
            "cross_attention",
            format!("feature dim {d} not divisible by {heads} heads"),
        ));
    }
    let dh = d / heads;
    let scale = match scale_mode {
        ScaleMode::PerHead => T::f(1.0 / (dh as f64).sqrt()),
        ScaleMode::LiteralDPrime => T::f(1.0 / (d as f64).sqrt()),
    };
    let biased = tape.mul_bcast0(p, gamma)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow(q, 0, h * dh, dh)?;
        let kh = tape.narrow(k, 0, h * dh, dh)?;
        let vh = tape.narrow(v, 0, h * dh, dh)?;
        let qt = tape.transpose(qh)?;
        let scores = tape.matmul(qt, kh)?;
        let scores = tape.mul_scalar(scores, scale)?;
        let ph = tape.index(biased, 0, h)?;
        let mut logits = tape.add(scores, ph)?;
        if let Some(m) = mask {
            logits = tape.add(logits, m)?;
        }
        let w = tape.softmax_last(logits)?; // (L_q, L_k)
        let wt = tape.transpose(w)?;
        outs.push(tape.matmul(vh, wt)?); // (dh, L_q)
        weights.push(w);
    }
    let out = tape.concat(&outs, 0)?;
    let stacked = tape.stack_last(&weights)?; // (L_q, L_k, H)
    let w = tape.permute(stacked, &[2, 0, 1])?;
    Ok((out, w))
}

/// Weighted per-band average of per-bin features (the input-derived encoder
/// query): `Q_k(t) = Σ_{f in G_k} w_f · z[:, f, t]`.
pub fn adaptive_query<T: Scalar>(
    tape: &mut Tape<T>,
    z: Var, // (D', F, T)
    bands: &BandConfig,
    w: Var, // (F,)
) -> Result<Var> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 || shape[1] != bands.f_bins {
        return Err(SfcError::shape("adaptive_query", format!("features {shape:?}")));
    }
    let zt = tape.permute(z, &[0, 2, 1])?; // (D', T, F)
    let weighted = tape.mul_bcast_last(zt, w)?;
    let mut per_band = Vec::with_capacity(bands.k());
    for band in &bands.bands {
        let slab = tape.narrow(weighted, 2, band.g_s, band.width())?;
        per_band.push(tape.sum_last(slab)?); // (D', T)
    }
    let stacked = tape.stack_last(&per_band)?; // (D', T, K)
    tape.permute(stacked, &[0, 2, 1])
}

/// Head- and band-averaged attention weights: `(T, H, K, F) -> (T, F)`.
/// Linear scale; exports apply the log transform (floor 1e-8) themselves.
pub fn attention_spectrogram<T: Scalar>(weights: &Tensor<T>) -> Result<Tensor<T>> {
    let s = weights.shape();
    if s.len() != 4 {
        return Err(SfcError::shape("attention_spectrogram", format!("weights {s:?}")));
    }
    let (t_len, h, k, f) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[t_len, f]);
    let inv = T::f(1.0 / (h * k) as f64);
    for t in 0..t_len {
        for hh in 0..h {
            for kk in 0..k {
                for ff in 0..f {
                    let v = out.at(&[t, ff]) + weights.at(&[t, hh, kk, ff]) * inv;
                    out.set(&[t, ff], v);
                }
            }
        }
    }
    Ok(out)
}

/// Additive band mask: 0 where bin f lies in band k, a large negative
/// constant elsewhere so softmax zeroes the weight exactly.
fn band_mask_tensor<T: Scalar>(bands: &BandConfig) -> Tensor<T> {
    let (k, f_bins) = (bands.k(), bands.f_bins);
    let mut m = Tensor::full(&[k, f_bins], T::f(-1e30));
    for (kk, band) in bands.bands.iter().enumerate() {
        for f in band.bins() {
            m.set(&[kk, f], T::zero());
        }
    }
    m
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaConfig {
    pub bands: BandConfig,
    /// Stacked real/imaginary input channels (2M).
    pub in_channels: usize,
    /// Separator feature dimension D.
    pub feature_dim: usize,
    /// Compression dimension D' used inside the codec.
    pub compress_dim: usize,
    pub heads: usize,
    pub num_sources: usize,
    pub query_mode: QueryMode,
    pub scale_mode: ScaleMode,
    pub pos_bias_init: PosBiasInit,
    pub learn_p: bool,
    pub learn_gamma: bool,
    pub negate_in_band: bool,
    pub band_mask: bool,
}

impl CaConfig {
    /// Default operating point: learnable queries, distance-initialized
    /// learnable P, fixed γ = 1, per-head scaling, no mask.
    pub fn new(
        bands: BandConfig,
        in_channels: usize,
        feature_dim: usize,
        compress_dim: usize,
        heads: usize,
        num_sources: usize,
    ) -> Self {
        CaConfig {
            bands,
            in_channels,
            feature_dim,
            compress_dim,
            heads,
            num_sources,
            query_mode: QueryMode::Learnable,
            scale_mode: ScaleMode::PerHead,
            pos_bias_init: PosBiasInit::Distance,
            learn_p: true,
            learn_gamma: false,
            negate_in_band: false,
            band_mask: false,
        }
    }
}

/// Query source for one attention stage.
#[derive(Debug, Clone)]
enum CaQuery<T: Scalar> {
    /// `(D', L_q)`, shared by every frame.
    Learnable(Parameter<T>),
    /// Encoder: weighted band averages, weight per bin.
    AdaptiveEnc(Parameter<T>),
    /// Decoder: FFN of the encoder's per-bin features.
    AdaptiveDec(SwiGluFfn<T>),
}

#[derive(Debug, Clone)]
struct CaBlock<T: Scalar> {
    q_lin: Linear<T>,
    k_lin: Linear<T>,
    v_lin: Linear<T>,
    pos: PosBias<T>,
    ffn: SwiGluFfn<T>,
}

impl<T: Scalar> Params<T> for CaBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.q_lin.visit(f);
        self.k_lin.visit(f);
        self.v_lin.visit(f);
        self.pos.visit(f);
        self.ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.q_lin.visit_mut(f);
        self.k_lin.visit_mut(f);
        self.v_lin.visit_mut(f);
        self.pos.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct CaCodec<T: Scalar> {
    cfg: CaConfig,
    enc_conv: Conv2d<T>,
    enc_norm: RmsNorm<T>,
    enc_query: CaQuery<T>,
    enc_block: CaBlock<T>,
    enc_out_conv: Conv2d<T>,
    enc_out_norm: RmsNorm<T>,
    dec_deconv: Deconv2d<T>,
    dec_query: CaQuery<T>,
    dec_block: CaBlock<T>,
    dec_out: Deconv2d<T>,
}

impl<T: Scalar> CaCodec<T> {
    pub fn new(cfg: CaConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        let (dp, h) = (cfg.compress_dim, cfg.heads);
        if cfg.in_channels == 0 || cfg.feature_dim == 0 || cfg.num_sources == 0 {
            return Err(SfcError::Config("cross-attention codec needs nonzero dims".into()));
        }
        if dp == 0 || h == 0 || dp % h != 0 {
            return Err(SfcError::Config(format!(
                "compress dim {dp} must be divisible by {h} heads"
            )));
        }
        let (f_bins, k) = (cfg.bands.f_bins, cfg.bands.k());
        let base = match cfg.pos_bias_init {
            PosBiasInit::Distance => build_pos_bias::<T>(&cfg.bands, cfg.negate_in_band),
            PosBiasInit::Zero => Tensor::zeros(&[k, f_bins]),
        };
        let enc_pos = PosBias::new("ca.enc.pos", &base, h, cfg.learn_p, cfg.learn_gamma);
        let dec_pos = enc_pos.transposed("ca.dec.pos");

        let enc_query = match cfg.query_mode {
            QueryMode::Learnable => CaQuery::Learnable(crate::nn::init_uniform(
                "ca.enc.query",
                &[dp, k],
                dp,
                rng,
            )),
            QueryMode::Adaptive => {
                let mut w = Tensor::zeros(&[f_bins]);
                for f in 0..f_bins {
                    let b = cfg.bands.first_band_containing(f).expect("bands cover spectrum");
                    w.set(&[f], T::f(1.0 / cfg.bands.bands[b].width() as f64));
                }
                CaQuery::AdaptiveEnc(Parameter::new("ca.enc.query_w", w))
            }
        };
        let dec_query = match cfg.query_mode {
            QueryMode::Learnable => CaQuery::Learnable(crate::nn::init_uniform(
                "ca.dec.query",
                &[dp, f_bins],
                dp,
                rng,
            )),
            QueryMode::Adaptive => {
                CaQuery::AdaptiveDec(SwiGluFfn::new("ca.dec.query_ffn", dp, 2 * dp, dp, rng))
            }
        };

        let block = |name: &str, pos: PosBias<T>, rng: &mut ChaCha12Rng| CaBlock {
            q_lin: Linear::new(&format!("{name}.q"), dp, dp, true, rng),
            k_lin: Linear::new(&format!("{name}.k"), dp, dp, true, rng),
            v_lin: Linear::new(&format!("{name}.v"), dp, dp, true, rng),
            pos,
            ffn: SwiGluFfn::new(&format!("{name}.ffn"), dp, 2 * dp, dp, rng),
        };
        Ok(CaCodec {
            enc_conv: Conv2d::new("ca.enc.conv", cfg.in_channels, dp, 3, 1, true, rng),
            enc_norm: RmsNorm::new("ca.enc.norm", dp),
            enc_block: block("ca.enc.attn", enc_pos, rng),
            enc_out_conv: Conv2d::new("ca.enc.out_conv", dp, cfg.feature_dim, 3, 1, true, rng),
            enc_out_norm: RmsNorm::new("ca.enc.out_norm", cfg.feature_dim),
            dec_deconv: Deconv2d::new("ca.dec.deconv", cfg.feature_dim, dp, 3, 1, true, rng),
            dec_block: block("ca.dec.attn", dec_pos, rng),
            dec_out: Deconv2d::new(
                "ca.dec.out",
                dp,
                cfg.num_sources * cfg.in_channels,
                3,
                1,
                true,
                rng,
            ),
            enc_query,
            dec_query,
            cfg,
        })
    }

    pub fn config(&self) -> &CaConfig {
        &self.cfg
    }

    fn enc_mask(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        if !self.cfg.band_mask {
            return Ok(None);
        }
        Ok(Some(tape.input(&band_mask_tensor::<T>(&self.cfg.bands))?))
    }

    fn dec_mask(&self, tape: &mut Tape<T>) -> Result<Option<Var>> {
        if !self.cfg.band_mask {
            return Ok(None);
        }
        let m = band_mask_tensor::<T>(&self.cfg.bands);
        let (k, f) = (m.shape()[0], m.shape()[1]);
        let mut mt = Tensor::zeros(&[f, k]);
        for kk in 0..k {
            for ff in 0..f {
                mt.set(&[ff, kk], m.at(&[kk, ff]));
            }
        }
        Ok(Some(tape.input(&mt)?))
    }

    /// Attention + FFN residual over a per-frame sequence of queries.
    /// `queries`: per-frame query grids `(D', L_q)`; `feats (D', L_k, T)`.
    /// Returns `(D', L_q, T)` plus per-frame weights.
    fn attend_frames(
        &self,
        tape: &mut Tape<T>,
        block: &CaBlock<T>,
        queries: &[Var],
        feats: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let t_frames = tape.shape(feats)[2];
        let (p, gamma) = block.pos.bind(tape)?;
        let mut outs = Vec::with_capacity(t_frames);
        let mut weights = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let feat_t = tape.index(feats, 2, t)?; // (D', L_k)
            let q_set = queries[if queries.len() == 1 { 0 } else { t }];
            let q = block.q_lin.forward(tape, q_set)?;
            let k = block.k_lin.forward(tape, feat_t)?;
            let v = block.v_lin.forward(tape, feat_t)?;
            let (out_t, w_t) =
                cross_attention(tape, q, k, v, p, gamma, mask, self.cfg.scale_mode)?;
            outs.push(out_t);
            weights.push(w_t);
        }
        let seq = tape.stack_last(&outs)?; // (D', L_q, T)
        let ffn_out = block.ffn.forward(tape, seq)?;
        let res = tape.add(ffn_out, seq)?;
        Ok((res, weights))
    }
}

impl<T: Scalar> Params<T> for CaCodec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.enc_conv.visit(f);
        self.enc_norm.visit(f);
        match &self.enc_query {
            CaQuery::Learnable(p) | CaQuery::AdaptiveEnc(p) => f(p),
            CaQuery::AdaptiveDec(ffn) => ffn.visit(f),
        }
        self.enc_block.visit(f);
        self.enc_out_conv.visit(f);
        self.enc_out_norm.visit(f);
        self.dec_deconv.visit(f);
        match &self.dec_query {
            CaQuery::Learnable(p) | CaQuery::AdaptiveEnc(p) => f(p),
            CaQuery::AdaptiveDec(ffn) => ffn.visit(f),
        }
        self.dec_block.visit(f);
        self.dec_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.enc_conv.visit_mut(f);
        self.enc_norm.visit_mut(f);
        match &mut self.enc_query {
            CaQuery::Learnable(p) | CaQuery::AdaptiveEnc(p) => f(p),
            CaQuery::AdaptiveDec(ffn) => ffn.visit_mut(f),
        }
        self.enc_block.visit_mut(f);
        self.enc_out_conv.visit_mut(f);
        self.enc_out_norm.visit_mut(f);
        self.dec_deconv.visit_mut(f);
        match &mut self.dec_query {
            CaQuery::Learnable(p) | CaQuery::AdaptiveEnc(p) => f(p),
            CaQuery::AdaptiveDec(ffn) => ffn.visit_mut(f),
        }
        self.dec_block.visit_mut(f);
        self.dec_out.visit_mut(f);
    }
}

impl<T: Scalar> Codec<T> for CaCodec<T> {
    fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Encoded> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels || shape[1] != self.cfg.bands.f_bins
        {
            return Err(SfcError::shape("ca.encode", format!("input {shape:?}")));
        }
        let t_frames = shape[2];
        let conv = self.enc_conv.forward(tape, x)?;
        let pre = self.enc_norm.forward(tape, conv)?; // (D', F, T)
        let queries: Vec<Var> = match &self.enc_query {
            CaQuery::Learnable(p) => vec![tape.param(p)?],
            CaQuery::AdaptiveEnc(wp) => {
                let w = tape.param(wp)?;
                let q = adaptive_query(tape, pre, &self.cfg.bands, w)?; // (D', K, T)
                (0..t_frames).map(|t| tape.index(q, 2, t)).collect::<Result<_>>()?
            }
            CaQuery::AdaptiveDec(_) => {
                return Err(SfcError::Config("decoder query variant on encoder".into()))
            }
        };
        let mask = self.enc_mask(tape)?;
        let (attended, weights) =
            self.attend_frames(tape, &self.enc_block, &queries, pre, mask)?;
        let out = self.enc_out_conv.forward(tape, attended)?;
        let z = self.enc_out_norm.forward(tape, out)?;
        Ok(Encoded { z, aux: EncodeAux::Ca { weights, pre_features: pre } })
    }

    fn decode(&self, tape: &mut Tape<T>, z: Var, enc: &Encoded) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        let k_bands = self.cfg.bands.k();
        if shape.len() != 3 || shape[0] != self.cfg.feature_dim || shape[1] != k_bands {
            return Err(SfcError::shape("ca.decode", format!("features {shape:?}")));
        }
        let t_frames = shape[2];
        let feats = self.dec_deconv.forward(tape, z)?; // (D', K, T)
        let queries: Vec<Var> = match &self.dec_query {
            CaQuery::Learnable(p) => vec![tape.param(p)?],
            CaQuery::AdaptiveDec(ffn) => {
                let pre = match &enc.aux {
                    EncodeAux::Ca { pre_features, .. } => *pre_features,
                    _ => {
                        return Err(SfcError::Config(
                            "adaptive decoder queries need the encoder pass".into(),
                        ))
                    }
                };
                let q = ffn.forward(tape, pre)?; // (D', F, T)
                (0..t_frames).map(|t| tape.index(q, 2, t)).collect::<Result<_>>()?
            }
            CaQuery::AdaptiveEnc(_) => {
                return Err(SfcError::Config("encoder query variant on decoder".into()))
            }
        };
        let mask = self.dec_mask(tape)?;
        let (attended, _) = self.attend_frames(tape, &self.dec_block, &queries, feats, mask)?;
        let m = self.dec_out.forward(tape, attended)?; // (N·2M, F, T)
        tape.reshape(
            m,
            &[self.cfg.num_sources, self.cfg.in_channels, self.cfg.bands.f_bins, t_frames],
        )
    }

    fn extra_buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.enc_block.pos.buffers();
        out.extend(self.dec_block.pos.buffers());
        out
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
