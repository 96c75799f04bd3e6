//! Scan-based spectral codec.
//!
//! Per frame, learned queries are interleaved with the spectral features into
//! a single frequency-ordered sequence; a selective state-space layer scans it
//! low→high and (on a second parameter set) high→low, and the query slots come
//! out carrying the band summaries. The decoder runs the mirror image: the
//! compressed features take the query slots, per-bin decoder queries take the
//! feature slots, and the feature-slot outputs become the mask estimate.

use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::ca::adaptive_query;
use super::interleave::{build_interleave_plan, extract, interleave, InterleavePlan};
use super::{Codec, Direction, EncodeAux, Encoded, InterleaveStrategy, QueryMode, Stage};
use crate::bands::BandConfig;
use crate::error::{Result, SfcError};
use crate::nn::{init_uniform, Conv1d, Conv2d, Deconv2d, Linear, Params, RmsNorm, SwiGluFfn};
use crate::tensor::{Parameter, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MambaConfig {
    pub bands: BandConfig,
    /// Input channels 2M (real/imag × audio channels).
    pub in_channels: usize,
    /// Compressed feature dimension D.
    pub feature_dim: usize,
    /// Scan width D'; each direction contributes D' channels before the
    /// output projection.
    pub compress_dim: usize,
    /// Hidden-state entries per channel.
    pub state_dim: usize,
    pub num_sources: usize,
    pub query_mode: QueryMode,
    pub strategy: InterleaveStrategy,
    /// Place backward band-start queries one slot late, matching the literal
    /// index formula instead of the scan-order reading.
    pub compat_literal_insert: bool,
}

impl MambaConfig {
    pub fn new(
        bands: BandConfig,
        in_channels: usize,
        feature_dim: usize,
        compress_dim: usize,
        num_sources: usize,
    ) -> Self {
        MambaConfig {
            bands,
            in_channels,
            feature_dim,
            compress_dim,
            state_dim: 8,
            num_sources,
            query_mode: QueryMode::Adaptive,
            strategy: InterleaveStrategy::BandMiddle,
            compat_literal_insert: false,
        }
    }
}

/// Selective state-space layer over a `(D', L)` sequence.
///
/// Input projection doubles the width into a scan branch and a swish gating
/// branch; the scan branch passes through a causal depthwise conv (width 4),
/// then a diagonal recurrence whose step size Δ and state projections B, C are
/// functions of the input. A is negative real, log-parameterized.
#[derive(Debug, Clone)]
pub struct SsmLayer<T: Scalar> {
    in_proj: Linear<T>,
    conv: Conv1d<T>,
    x_proj: Linear<T>,
    dt_proj: Linear<T>,
    a_log: Parameter<T>,
    d_skip: Parameter<T>,
    out_proj: Linear<T>,
    dt_rank: usize,
    state_dim: usize,
}

impl<T: Scalar> SsmLayer<T> {
    pub fn new(name: &str, width: usize, state_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let d_inner = 2 * width;
        let dt_rank = width.div_ceil(16).max(1);
        let mut dt_proj = Linear::new(&format!("{name}.dt_proj"), dt_rank, d_inner, true, rng);
        // Bias chosen so softplus(bias) lands log-uniformly in [1e-3, 1e-1]:
        // the recurrence starts with usable step sizes instead of saturating.
        let bias = dt_proj.b.as_mut().expect("dt_proj keeps its bias");
        let (lo, hi) = ((1e-3f64).ln(), (1e-1f64).ln());
        for i in 0..d_inner {
            let dt = rng.random_range(lo..hi).exp();
            bias.value.set(&[i], T::f((dt.exp() - 1.0).ln()));
        }
        let mut a_log = Tensor::zeros(&[d_inner, state_dim]);
        for d in 0..d_inner {
            for n in 0..state_dim {
                a_log.set(&[d, n], T::f(((n + 1) as f64).ln()));
            }
        }
        SsmLayer {
            in_proj: Linear::new(&format!("{name}.in_proj"), width, 2 * d_inner, false, rng),
            conv: Conv1d::new(&format!("{name}.conv"), d_inner, d_inner, 4, d_inner, 3, 0, true, rng),
            x_proj: Linear::new(
                &format!("{name}.x_proj"),
                d_inner,
                dt_rank + 2 * state_dim,
                false,
                rng,
            ),
            dt_proj,
            a_log: Parameter::new(format!("{name}.a_log"), a_log),
            d_skip: Parameter::new(format!("{name}.d_skip"), Tensor::full(&[d_inner], T::f(1.0))),
            out_proj: Linear::new(&format!("{name}.out_proj"), d_inner, width, false, rng),
            dt_rank,
            state_dim,
        }
    }

    /// `(D', L) -> (D', L)`, causal along L.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let d_inner = self.d_skip.value.shape()[0];
        let xz = self.in_proj.forward(tape, x)?;
        let xh = tape.narrow(xz, 0, 0, d_inner)?;
        let zh = tape.narrow(xz, 0, d_inner, d_inner)?;
        let xc = self.conv.forward(tape, xh)?;
        let xc = tape.silu(xc)?;
        let proj = self.x_proj.forward(tape, xc)?;
        let dt_low = tape.narrow(proj, 0, 0, self.dt_rank)?;
        let b = tape.narrow(proj, 0, self.dt_rank, self.state_dim)?;
        let c = tape.narrow(proj, 0, self.dt_rank + self.state_dim, self.state_dim)?;
        let dt = self.dt_proj.forward(tape, dt_low)?;
        let dt = tape.softplus(dt)?;
        let a_log = tape.param(&self.a_log)?;
        let a_exp = tape.exp(a_log)?;
        let a = tape.mul_scalar(a_exp, T::f(-1.0))?;
        let d_skip = tape.param(&self.d_skip)?;
        let y = tape.ssm_scan(xc, dt, a, b, c, d_skip)?;
        let gate = tape.silu(zh)?;
        let y = tape.mul(y, gate)?;
        self.out_proj.forward(tape, y)
    }
}

impl<T: Scalar> Params<T> for SsmLayer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.in_proj.visit(f);
        self.conv.visit(f);
        self.x_proj.visit(f);
        self.dt_proj.visit(f);
        f(&self.a_log);
        f(&self.d_skip);
        self.out_proj.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.in_proj.visit_mut(f);
        self.conv.visit_mut(f);
        self.x_proj.visit_mut(f);
        self.dt_proj.visit_mut(f);
        f(&mut self.a_log);
        f(&mut self.d_skip);
        self.out_proj.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
enum MambaQuery<T: Scalar> {
    /// Directly learned bank: `(D', K)` on the encoder, `(D', F)` on the decoder.
    Learnable(Parameter<T>),
    /// Per-bin weights for band-wise weighted sums of the conv features.
    AdaptiveEnc(Parameter<T>),
    /// Derives per-bin decoder queries from the encoder's retained
    /// feature-slot scan outputs (both directions concatenated).
    AdaptiveDec(SwiGluFfn<T>),
}

#[derive(Debug, Clone)]
pub struct MambaCodec<T: Scalar> {
    pub cfg: MambaConfig,
    enc_conv: Conv2d<T>,
    enc_norm: RmsNorm<T>,
    enc_query: MambaQuery<T>,
    enc_fwd: SsmLayer<T>,
    enc_bwd: SsmLayer<T>,
    enc_plan_fwd: InterleavePlan,
    enc_plan_bwd: InterleavePlan,
    enc_out_conv: Conv2d<T>,
    enc_out_norm: RmsNorm<T>,
    dec_deconv: Deconv2d<T>,
    dec_query: MambaQuery<T>,
    dec_fwd: SsmLayer<T>,
    dec_bwd: SsmLayer<T>,
    dec_plan_fwd: InterleavePlan,
    dec_plan_bwd: InterleavePlan,
    dec_out: Deconv2d<T>,
}

impl<T: Scalar> MambaCodec<T> {
    pub fn new(cfg: MambaConfig, rng: &mut ChaCha12Rng) -> Result<Self> {
        let dp = cfg.compress_dim;
        let f_bins = cfg.bands.f_bins;
        let k = cfg.bands.k();
        let enc_query = match cfg.query_mode {
            QueryMode::Learnable => {
                MambaQuery::Learnable(init_uniform("mamba.enc.query", &[dp, k], dp, rng))
            }
            QueryMode::Adaptive => {
                let mut w = Tensor::zeros(&[f_bins]);
                for f in 0..f_bins {
                    let b = cfg.bands.first_band_containing(f).expect("bands cover spectrum");
                    w.set(&[f], T::f(1.0 / cfg.bands.bands[b].width() as f64));
                }
                MambaQuery::AdaptiveEnc(Parameter::new("mamba.enc.query_w", w))
            }
        };
        let dec_query = match cfg.query_mode {
            QueryMode::Learnable => {
                MambaQuery::Learnable(init_uniform("mamba.dec.query", &[dp, f_bins], dp, rng))
            }
            QueryMode::Adaptive => MambaQuery::AdaptiveDec(SwiGluFfn::new(
                "mamba.dec.query_ffn",
                2 * dp,
                2 * dp,
                dp,
                rng,
            )),
        };
        let plan = |dir, stage| {
            build_interleave_plan(&cfg.bands, cfg.strategy, dir, stage, cfg.compat_literal_insert)
        };
        Ok(MambaCodec {
            enc_conv: Conv2d::new("mamba.enc.conv", cfg.in_channels, dp, 3, 1, true, rng),
            enc_norm: RmsNorm::new("mamba.enc.norm", dp),
            enc_query,
            enc_fwd: SsmLayer::new("mamba.enc.fwd", dp, cfg.state_dim, rng),
            enc_bwd: SsmLayer::new("mamba.enc.bwd", dp, cfg.state_dim, rng),
            enc_plan_fwd: plan(Direction::Fwd, Stage::Encoder)?,
            enc_plan_bwd: plan(Direction::Bwd, Stage::Encoder)?,
            enc_out_conv: Conv2d::new("mamba.enc.out_conv", 2 * dp, cfg.feature_dim, 3, 1, true, rng),
            enc_out_norm: RmsNorm::new("mamba.enc.out_norm", cfg.feature_dim),
            dec_deconv: Deconv2d::new("mamba.dec.deconv", cfg.feature_dim, dp, 3, 1, true, rng),
            dec_query,
            dec_fwd: SsmLayer::new("mamba.dec.fwd", dp, cfg.state_dim, rng),
            dec_bwd: SsmLayer::new("mamba.dec.bwd", dp, cfg.state_dim, rng),
            dec_plan_fwd: plan(Direction::Fwd, Stage::Decoder)?,
            dec_plan_bwd: plan(Direction::Bwd, Stage::Decoder)?,
            dec_out: Deconv2d::new("mamba.dec.out", 2 * dp, cfg.num_sources * cfg.in_channels, 3, 1, true, rng),
            cfg,
        })
    }

    /// One directional pass over a single frame: interleave, run the layer in
    /// the plan's scan direction, split the outputs back into query slots and
    /// feature slots (both in natural low→high order).
    fn scan(
        &self,
        tape: &mut Tape<T>,
        layer: &SsmLayer<T>,
        features: Var,
        queries: Var,
        plan: &InterleavePlan,
    ) -> Result<(Var, Var)> {
        let seq = interleave(tape, features, queries, plan)?;
        let seq = match plan.direction {
            Direction::Fwd => seq,
            Direction::Bwd => tape.reverse_last(seq)?,
        };
        let y = layer.forward(tape, seq)?;
        let y = match plan.direction {
            Direction::Fwd => y,
            Direction::Bwd => tape.reverse_last(y)?,
        };
        let q_out = extract(tape, y, &plan.query_slots)?;
        let f_out = extract(tape, y, &plan.feature_slots)?;
        Ok((q_out, f_out))
    }
}

impl<T: Scalar> Params<T> for MambaCodec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.enc_conv.visit(f);
        self.enc_norm.visit(f);
        match &self.enc_query {
            MambaQuery::Learnable(p) | MambaQuery::AdaptiveEnc(p) => f(p),
            MambaQuery::AdaptiveDec(ffn) => ffn.visit(f),
        }
        self.enc_fwd.visit(f);
        self.enc_bwd.visit(f);
        self.enc_out_conv.visit(f);
        self.enc_out_norm.visit(f);
        self.dec_deconv.visit(f);
        match &self.dec_query {
            MambaQuery::Learnable(p) | MambaQuery::AdaptiveEnc(p) => f(p),
            MambaQuery::AdaptiveDec(ffn) => ffn.visit(f),
        }
        self.dec_fwd.visit(f);
        self.dec_bwd.visit(f);
        self.dec_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.enc_conv.visit_mut(f);
        self.enc_norm.visit_mut(f);
        match &mut self.enc_query {
            MambaQuery::Learnable(p) | MambaQuery::AdaptiveEnc(p) => f(p),
            MambaQuery::AdaptiveDec(ffn) => ffn.visit_mut(f),
        }
        self.enc_fwd.visit_mut(f);
        self.enc_bwd.visit_mut(f);
        self.enc_out_conv.visit_mut(f);
        self.enc_out_norm.visit_mut(f);
        self.dec_deconv.visit_mut(f);
        match &mut self.dec_query {
            MambaQuery::Learnable(p) | MambaQuery::AdaptiveEnc(p) => f(p),
            MambaQuery::AdaptiveDec(ffn) => ffn.visit_mut(f),
        }
        self.dec_fwd.visit_mut(f);
        self.dec_bwd.visit_mut(f);
        self.dec_out.visit_mut(f);
    }
}

impl<T: Scalar> Codec<T> for MambaCodec<T> {
    fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Encoded> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels || shape[1] != self.cfg.bands.f_bins
        {
            return Err(SfcError::shape("mamba.encode", format!("input {shape:?}")));
        }
        let t_frames = shape[2];
        let conv = self.enc_conv.forward(tape, x)?;
        let pre = self.enc_norm.forward(tape, conv)?; // (D', F, T)
        let queries: Vec<Var> = match &self.enc_query {
            MambaQuery::Learnable(p) => vec![tape.param(p)?],
            MambaQuery::AdaptiveEnc(wp) => {
                let w = tape.param(wp)?;
                let q = adaptive_query(tape, pre, &self.cfg.bands, w)?; // (D', K, T)
                (0..t_frames).map(|t| tape.index(q, 2, t)).collect::<Result<_>>()?
            }
            MambaQuery::AdaptiveDec(_) => {
                return Err(SfcError::Config("decoder query variant on encoder".into()))
            }
        };
        let mut z_frames = Vec::with_capacity(t_frames);
        let mut fwd_frames = Vec::with_capacity(t_frames);
        let mut bwd_frames = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let feat = tape.index(pre, 2, t)?; // (D', F)
            let q = queries[t.min(queries.len() - 1)];
            let (zf, ff) = self.scan(tape, &self.enc_fwd, feat, q, &self.enc_plan_fwd)?;
            let (zb, fb) = self.scan(tape, &self.enc_bwd, feat, q, &self.enc_plan_bwd)?;
            z_frames.push(tape.concat(&[zf, zb], 0)?); // (2D', K)
            fwd_frames.push(ff);
            bwd_frames.push(fb);
        }
        let z_grid = tape.stack_last(&z_frames)?; // (2D', K, T)
        let fwd = tape.stack_last(&fwd_frames)?; // (D', F, T)
        let bwd = tape.stack_last(&bwd_frames)?;
        let out = self.enc_out_conv.forward(tape, z_grid)?;
        let z = self.enc_out_norm.forward(tape, out)?;
        Ok(Encoded { z, aux: EncodeAux::ScanFeatures { fwd, bwd } })
    }

    fn decode(&self, tape: &mut Tape<T>, z: Var, enc: &Encoded) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        let k_bands = self.cfg.bands.k();
        if shape.len() != 3 || shape[0] != self.cfg.feature_dim || shape[1] != k_bands {
            return Err(SfcError::shape("mamba.decode", format!("features {shape:?}")));
        }
        let t_frames = shape[2];
        let zd = self.dec_deconv.forward(tape, z)?; // (D', K, T), shared by both scans
        let queries: Vec<Var> = match &self.dec_query {
            MambaQuery::Learnable(p) => vec![tape.param(p)?],
            MambaQuery::AdaptiveDec(ffn) => {
                let (fwd, bwd) = match &enc.aux {
                    EncodeAux::ScanFeatures { fwd, bwd } => (*fwd, *bwd),
                    _ => {
                        return Err(SfcError::Config(
                            "adaptive decoder queries need the encoder scan outputs".into(),
                        ))
                    }
                };
                let cat = tape.concat(&[fwd, bwd], 0)?; // (2D', F, T)
                let q = ffn.forward(tape, cat)?; // (D', F, T)
                (0..t_frames).map(|t| tape.index(q, 2, t)).collect::<Result<_>>()?
            }
            MambaQuery::AdaptiveEnc(_) => {
                return Err(SfcError::Config("encoder query variant on decoder".into()))
            }
        };
        // Decoder sequences put the K compressed features at the query slots
        // and the F per-bin queries at the feature slots; the feature-slot
        // outputs are the per-bin mask estimates.
        let mut m_frames = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let comp = tape.index(zd, 2, t)?; // (D', K)
            let q = queries[t.min(queries.len() - 1)]; // (D', F)
            let (_, mf) = self.scan(tape, &self.dec_fwd, q, comp, &self.dec_plan_fwd)?;
            let (_, mb) = self.scan(tape, &self.dec_bwd, q, comp, &self.dec_plan_bwd)?;
            m_frames.push(tape.concat(&[mf, mb], 0)?); // (2D', F)
        }
        let m_grid = tape.stack_last(&m_frames)?; // (2D', F, T)
        let m = self.dec_out.forward(tape, m_grid)?; // (N·2M, F, T)
        tape.reshape(
            m,
            &[self.cfg.num_sources, self.cfg.in_channels, self.cfg.bands.f_bins, t_frames],
        )
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
