//! Parameter and FLOP accounting. Parameter counts come from the live
//! model's introspection, so they are exact by construction; FLOPs come from
//! closed-form per-op formulas on the config. Conventions: one multiply-add
//! is 2 FLOPs, every nonlinearity (tanh, sigmoid, SiLU, softmax) is 1 FLOP
//! per element.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{CodecConfig, Model, ModelConfig};
use crate::separator::SeparatorConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentCost {
    pub name: String,
    pub params: usize,
    /// FLOPs for one forward pass over the reported duration.
    pub flops: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub config: ModelConfig,
    /// encoder, separator, decoder — in signal order.
    pub components: Vec<ComponentCost>,
    pub duration_secs: f64,
    pub frames: usize,
}

impl CostReport {
    pub fn total_params(&self) -> usize {
        self.components.iter().map(|c| c.params).sum()
    }

    pub fn total_flops(&self) -> f64 {
        self.components.iter().map(|c| c.flops).sum()
    }

    pub fn flops_per_second(&self) -> f64 {
        self.total_flops() / self.duration_secs
    }

    /// Line-delimited report; one record per component plus a total line.
    pub fn to_text(&self) -> String {
        let mut s = format!("frames={} duration_secs={}\n", self.frames, self.duration_secs);
        for c in &self.components {
            writeln!(
                s,
                "component={} params={} flops={} flops_per_second={}",
                c.name,
                c.params,
                c.flops,
                c.flops / self.duration_secs
            )
            .expect("string write");
        }
        writeln!(
            s,
            "total params={} flops={} flops_per_second={}",
            self.total_params(),
            self.total_flops(),
            self.flops_per_second()
        )
        .expect("string write");
        s
    }
}

fn linear_fl(d_in: usize, d_out: usize, positions: usize, bias: bool) -> f64 {
    ((2 * d_in + bias as usize) * d_out * positions) as f64
}

fn conv2d_fl(c_in: usize, c_out: usize, kh: usize, kw: usize, f: usize, t: usize) -> f64 {
    ((2 * c_in * kh * kw + 1) * c_out * f * t) as f64
}

fn rms_fl(numel: usize) -> f64 {
    (4 * numel) as f64
}

/// Score and mix matmuls plus the softmax, for one attention pattern.
fn attn_core_fl(d: usize, heads: usize, l_q: usize, l_k: usize, batch: usize) -> f64 {
    ((4 * d + heads) * l_q * l_k * batch) as f64
}

fn swiglu_fl(d_in: usize, inner: usize, d_out: usize, positions: usize) -> f64 {
    linear_fl(d_in, inner, positions, false) * 2.0
        + (2 * inner * positions) as f64
        + linear_fl(inner, d_out, positions, false)
}

/// One bidirectional-scan layer over `l` positions.
fn ssm_fl(width: usize, state: usize, l: usize) -> f64 {
    let d_inner = 2 * width;
    let dt_rank = width.div_ceil(16).max(1);
    linear_fl(width, 2 * d_inner, l, false)
        + ((2 * 4 + 1) * d_inner * l) as f64 // depthwise conv, k=4
        + (d_inner * l) as f64 // silu
        + linear_fl(d_inner, dt_rank + 2 * state, l, false)
        + linear_fl(dt_rank, d_inner, l, true)
        + (d_inner * l) as f64 // softplus
        + (9 * d_inner * state * l) as f64 // recurrence + readout
        + (2 * d_inner * l) as f64 // gate silu + mul
        + linear_fl(d_inner, width, l, false)
}

/// Gated convolutional feed-forward over `len`-long rows, `batch` rows.
fn conv_ffn_fl(d: usize, hidden: usize, kernel: usize, len: usize, batch: usize) -> f64 {
    let l = len * batch;
    ((2 * d * kernel + 1) * 2 * hidden * l) as f64
        + (2 * hidden * l) as f64
        + ((2 * hidden * kernel + 1) * d * l) as f64
}

fn codec_flops(codec: &CodecConfig, t: usize) -> (f64, f64) {
    let f = codec.bands().f_bins;
    let k = codec.bands().k();
    let c = codec.in_channels();
    let d = codec.feature_dim();
    let n = codec.num_sources();
    match codec {
        CodecConfig::Bs(cfg) => {
            let mut enc = 0.0;
            let mut dec = 0.0;
            for band in &cfg.bands.bands {
                let w = band.width();
                enc += rms_fl(c * w * t) + linear_fl(c * w, d, t, true);
                let out = 2 * n * c * w;
                dec += rms_fl(d * t)
                    + linear_fl(d, 4 * d, t, true)
                    + (4 * d * t) as f64; // tanh
                for _ in 1..cfg.hidden_layers {
                    dec += linear_fl(4 * d, 4 * d, t, true) + (4 * d * t) as f64;
                }
                dec += linear_fl(4 * d, out, t, true) + (out * t) as f64; // GLU gate
            }
            (enc, dec)
        }
        CodecConfig::SfcCa(cfg) => {
            let dp = cfg.compress_dim;
            let h = cfg.heads;
            let adaptive = cfg.query_mode == crate::codec::QueryMode::Adaptive;
            let mut enc = conv2d_fl(c, dp, 3, 1, f, t) + rms_fl(dp * f * t);
            if adaptive {
                enc += (2 * dp * f * t) as f64; // banded weighted means
            }
            enc += linear_fl(dp, dp, k * t, true) // q
                + 2.0 * linear_fl(dp, dp, f * t, true) // k, v
                + attn_core_fl(dp, h, k, f, t)
                + (h * k * f * t) as f64 // positional bias add
                + swiglu_fl(dp, 2 * dp, dp, k * t)
                + conv2d_fl(dp, d, 3, 1, k, t)
                + rms_fl(d * k * t);
            let mut dec = conv2d_fl(d, dp, 3, 1, k, t);
            if adaptive {
                dec += swiglu_fl(dp, 2 * dp, dp, f * t);
            }
            dec += linear_fl(dp, dp, f * t, true)
                + 2.0 * linear_fl(dp, dp, k * t, true)
                + attn_core_fl(dp, h, f, k, t)
                + (h * f * k * t) as f64
                + swiglu_fl(dp, 2 * dp, dp, f * t)
                + conv2d_fl(dp, n * c, 3, 1, f, t);
            (enc, dec)
        }
        CodecConfig::SfcMamba(cfg) => {
            let dp = cfg.compress_dim;
            let s = cfg.state_dim;
            let l = (f + k) * t; // interleaved scan length per direction
            let adaptive = cfg.query_mode == crate::codec::QueryMode::Adaptive;
            let mut enc = conv2d_fl(c, dp, 3, 1, f, t) + rms_fl(dp * f * t);
            if adaptive {
                enc += (2 * dp * f * t) as f64;
            }
            enc += 2.0 * ssm_fl(dp, s, l)
                + conv2d_fl(2 * dp, d, 3, 1, k, t)
                + rms_fl(d * k * t);
            let mut dec = conv2d_fl(d, dp, 3, 1, k, t);
            if adaptive {
                dec += swiglu_fl(2 * dp, 2 * dp, dp, f * t);
            }
            dec += 2.0 * ssm_fl(dp, s, l) + conv2d_fl(2 * dp, n * c, 3, 1, f, t);
            (enc, dec)
        }
    }
}

/// Forward cost of the dual-path core on a `(D, K, T)` grid.
pub fn separator_flops(cfg: &SeparatorConfig, k: usize, t: usize) -> f64 {
    let d = cfg.feature_dim;
    let grid = k * t;
    let sublayer = |len: usize, batch: usize| {
        rms_fl(d * grid)
            + 4.0 * linear_fl(d, d, grid, true) // q, k, v, out
            + attn_core_fl(d, cfg.heads, len, len, batch)
            + (d * grid) as f64 // residual
            + rms_fl(d * grid)
            + conv_ffn_fl(d, cfg.conv_hidden, cfg.kernel, len, batch)
            + (d * grid) as f64
    };
    cfg.blocks as f64 * (sublayer(k, t) + sublayer(t, k))
}

/// Build the model once for exact parameter counts, attach closed-form FLOPs
/// for a `duration_secs` input at the given frontend settings.
pub fn report(
    cfg: &ModelConfig,
    sample_rate: usize,
    hop: usize,
    duration_secs: f64,
) -> Result<CostReport> {
    cfg.validate()?;
    let frames = ((duration_secs * sample_rate as f64) as usize) / hop + 1;
    let model = Model::<f64>::build(cfg.clone(), 0)?;
    let mut enc_params = 0usize;
    let mut dec_params = 0usize;
    let mut sep_params = 0usize;
    for (name, _, n) in model.param_table() {
        if name.contains(".enc.") {
            enc_params += n;
        } else if name.contains(".dec.") {
            dec_params += n;
        } else {
            sep_params += n;
        }
    }
    let (enc_fl, dec_fl) = codec_flops(&cfg.codec, frames);
    let sep_fl = separator_flops(&cfg.separator, cfg.codec.bands().k(), frames);
    Ok(CostReport {
        config: cfg.clone(),
        components: vec![
            ComponentCost { name: "encoder".into(), params: enc_params, flops: enc_fl },
            ComponentCost { name: "separator".into(), params: sep_params, flops: sep_fl },
            ComponentCost { name: "decoder".into(), params: dec_params, flops: dec_fl },
        ],
        duration_secs,
        frames,
    })
}

/// CSV sweep over band counts: one row per K with per-component params and
/// FLOP rates.
pub fn sweep_csv(
    make: impl Fn(usize) -> Result<ModelConfig>,
    ks: &[usize],
    sample_rate: usize,
    hop: usize,
    duration_secs: f64,
) -> Result<String> {
    let mut out = String::from(
        "k,encoder_params,separator_params,decoder_params,total_params,\
         encoder_flops_per_s,separator_flops_per_s,decoder_flops_per_s,total_flops_per_s\n",
    );
    for &k in ks {
        let cfg = make(k)?;
        let r = report(&cfg, sample_rate, hop, duration_secs)?;
        let fps = |i: usize| r.components[i].flops / r.duration_secs;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            k,
            r.components[0].params,
            r.components[1].params,
            r.components[2].params,
            r.total_params(),
            fps(0),
            fps(1),
            fps(2),
            r.flops_per_second()
        )
        .expect("string write");
    }
    Ok(out)
}
