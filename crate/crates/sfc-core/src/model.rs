//! Whole-model assembly: one codec around the dual-path core, presets for the
//! published operating points, the ablation lattice, and a structural
//! signature that tells model variants apart.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bands::{gen_full, BandConfig};
use crate::codec::{
    BsCodec, BsConfig, CaCodec, CaConfig, Codec, Encoded, InterleaveStrategy, MambaCodec,
    MambaConfig, PosBiasInit, QueryMode,
};
use crate::error::{Result, SfcError};
use crate::nn::Params;
use crate::separator::{Separator, SeparatorConfig};
use crate::tensor::{Parameter, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Bs,
    SfcCa,
    SfcMamba,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CodecConfig {
    Bs(BsConfig),
    SfcCa(CaConfig),
    SfcMamba(MambaConfig),
}

impl CodecConfig {
    pub fn bands(&self) -> &BandConfig {
        match self {
            CodecConfig::Bs(c) => &c.bands,
            CodecConfig::SfcCa(c) => &c.bands,
            CodecConfig::SfcMamba(c) => &c.bands,
        }
    }
    pub fn feature_dim(&self) -> usize {
        match self {
            CodecConfig::Bs(c) => c.feature_dim,
            CodecConfig::SfcCa(c) => c.feature_dim,
            CodecConfig::SfcMamba(c) => c.feature_dim,
        }
    }
    pub fn in_channels(&self) -> usize {
        match self {
            CodecConfig::Bs(c) => c.in_channels,
            CodecConfig::SfcCa(c) => c.in_channels,
            CodecConfig::SfcMamba(c) => c.in_channels,
        }
    }
    pub fn num_sources(&self) -> usize {
        match self {
            CodecConfig::Bs(c) => c.num_sources,
            CodecConfig::SfcCa(c) => c.num_sources,
            CodecConfig::SfcMamba(c) => c.num_sources,
        }
    }
    pub fn kind(&self) -> CodecKind {
        match self {
            CodecConfig::Bs(_) => CodecKind::Bs,
            CodecConfig::SfcCa(_) => CodecKind::SfcCa,
            CodecConfig::SfcMamba(_) => CodecKind::SfcMamba,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub separator: SeparatorConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.codec.bands().validate()?;
        if self.codec.feature_dim() != self.separator.feature_dim {
            return Err(SfcError::Config(format!(
                "codec emits {}-dim features but the separator expects {}",
                self.codec.feature_dim(),
                self.separator.feature_dim
            )));
        }
        Ok(())
    }

    /// Published small operating point around the requested codec:
    /// 4-block D=96 core; D'=64/H=4 attention codec, D'=32 scan codec.
    pub fn small(kind: CodecKind, bands: BandConfig, in_channels: usize, num_sources: usize) -> Self {
        let sep = SeparatorConfig::small();
        let d = sep.feature_dim;
        let codec = match kind {
            CodecKind::Bs => CodecConfig::Bs(BsConfig {
                bands,
                in_channels,
                feature_dim: d,
                num_sources,
                hidden_layers: 1,
            }),
            CodecKind::SfcCa => {
                CodecConfig::SfcCa(CaConfig::new(bands, in_channels, d, 64, 4, num_sources))
            }
            CodecKind::SfcMamba => {
                CodecConfig::SfcMamba(MambaConfig::new(bands, in_channels, d, 32, num_sources))
            }
        };
        ModelConfig { codec, separator: sep }
    }

    /// Published medium operating point: 6-block D=128 core; D'=96 attention
    /// codec, D'=48 scan codec.
    pub fn medium(kind: CodecKind, bands: BandConfig, in_channels: usize, num_sources: usize) -> Self {
        let sep = SeparatorConfig::medium();
        let d = sep.feature_dim;
        let codec = match kind {
            CodecKind::Bs => CodecConfig::Bs(BsConfig {
                bands,
                in_channels,
                feature_dim: d,
                num_sources,
                hidden_layers: 1,
            }),
            CodecKind::SfcCa => {
                CodecConfig::SfcCa(CaConfig::new(bands, in_channels, d, 96, 4, num_sources))
            }
            CodecKind::SfcMamba => {
                CodecConfig::SfcMamba(MambaConfig::new(bands, in_channels, d, 48, num_sources))
            }
        };
        ModelConfig { codec, separator: sep }
    }
}

#[derive(Debug, Clone)]
pub enum AnyCodec<T: Scalar> {
    Bs(BsCodec<T>),
    Ca(CaCodec<T>),
    Mamba(MambaCodec<T>),
}

impl<T: Scalar> Params<T> for AnyCodec<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        match self {
            AnyCodec::Bs(c) => c.visit(f),
            AnyCodec::Ca(c) => c.visit(f),
            AnyCodec::Mamba(c) => c.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        match self {
            AnyCodec::Bs(c) => c.visit_mut(f),
            AnyCodec::Ca(c) => c.visit_mut(f),
            AnyCodec::Mamba(c) => c.visit_mut(f),
        }
    }
}

impl<T: Scalar> Codec<T> for AnyCodec<T> {
    fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Encoded> {
        match self {
            AnyCodec::Bs(c) => c.encode(tape, x),
            AnyCodec::Ca(c) => c.encode(tape, x),
            AnyCodec::Mamba(c) => c.encode(tape, x),
        }
    }
    fn decode(&self, tape: &mut Tape<T>, z: Var, enc: &Encoded) -> Result<Var> {
        match self {
            AnyCodec::Bs(c) => c.decode(tape, z, enc),
            AnyCodec::Ca(c) => c.decode(tape, z, enc),
            AnyCodec::Mamba(c) => c.decode(tape, z, enc),
        }
    }
    fn extra_buffers(&self) -> Vec<(String, Tensor<T>)> {
        match self {
            AnyCodec::Bs(c) => c.extra_buffers(),
            AnyCodec::Ca(c) => c.extra_buffers(),
            AnyCodec::Mamba(c) => c.extra_buffers(),
        }
    }
    fn feature_dim(&self) -> usize {
        match self {
            AnyCodec::Bs(c) => c.feature_dim(),
            AnyCodec::Ca(c) => c.feature_dim(),
            AnyCodec::Mamba(c) => c.feature_dim(),
        }
    }
    fn num_bands(&self) -> usize {
        match self {
            AnyCodec::Bs(c) => c.num_bands(),
            AnyCodec::Ca(c) => c.num_bands(),
            AnyCodec::Mamba(c) => c.num_bands(),
        }
    }
    fn f_bins(&self) -> usize {
        match self {
            AnyCodec::Bs(c) => c.f_bins(),
            AnyCodec::Ca(c) => c.f_bins(),
            AnyCodec::Mamba(c) => c.f_bins(),
        }
    }
    fn num_sources(&self) -> usize {
        match self {
            AnyCodec::Bs(c) => c.num_sources(),
            AnyCodec::Ca(c) => c.num_sources(),
            AnyCodec::Mamba(c) => c.num_sources(),
        }
    }
    fn in_channels(&self) -> usize {
        match self {
            AnyCodec::Bs(c) => c.in_channels(),
            AnyCodec::Ca(c) => c.in_channels(),
            AnyCodec::Mamba(c) => c.in_channels(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub codec: AnyCodec<T>,
    pub separator: Separator<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let codec = match &cfg.codec {
            CodecConfig::Bs(c) => AnyCodec::Bs(BsCodec::new(c.clone(), &mut rng)?),
            CodecConfig::SfcCa(c) => AnyCodec::Ca(CaCodec::new(c.clone(), &mut rng)?),
            CodecConfig::SfcMamba(c) => AnyCodec::Mamba(MambaCodec::new(c.clone(), &mut rng)?),
        };
        let separator = Separator::new(cfg.separator.clone(), &mut rng)?;
        Ok(Model { cfg, codec, separator })
    }

    /// `(2M, F, T)` mixture features → `(N, 2M, F, T)` mask estimates.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let enc = self.codec.encode(tape, x)?;
        let z = self.separator.forward(tape, enc.z)?;
        self.codec.decode(tape, z, &enc)
    }

    pub fn param_count(&self) -> usize {
        self.collect_params().iter().map(|p| p.value.numel()).sum()
    }

    /// (name, shape, element count) for every learnable tensor, visit order.
    pub fn param_table(&self) -> Vec<(String, Vec<usize>, usize)> {
        self.collect_params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.numel()))
            .collect()
    }

    /// Structural fingerprint: hashes the config, every parameter's name and
    /// shape, and every fixed buffer's name, shape, and values. Parameter
    /// values are excluded, so the signature survives training but separates
    /// variants that differ only in a frozen tensor.
    pub fn signature(&self) -> String {
        let mut h = Sha256::new();
        let cfg = serde_json::to_string(&self.cfg).expect("config serializes");
        h.update(cfg.as_bytes());
        for p in self.collect_params() {
            h.update(p.name.as_bytes());
            h.update(b"\x1f");
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(b"\x1e");
        }
        for (name, buf) in self.codec.extra_buffers() {
            h.update(name.as_bytes());
            h.update(b"\x1f");
            for d in buf.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in buf.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
            h.update(b"\x1e");
        }
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}

impl<T: Scalar> Params<T> for Model<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter<T>)) {
        self.codec.visit(f);
        self.separator.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.codec.visit_mut(f);
        self.separator.visit_mut(f);
    }
}

/// Rows of the published ablation grids: band-split inductive bias (e1–e2),
/// query placement for the scan codec (e3–e5), the {P, γ} lattice for the
/// attention codec (e6–e11), and query modes for both codecs (f1–f4).
pub const ABLATION_IDS: &[&str] = &[
    "e1", "e2", "e3", "e4", "e5", "e6", "e7", "e8", "e9", "e10", "e11", "f1", "f2", "f3", "f4",
];

/// Scale knobs shared by every ablation row; rows only change structure.
#[derive(Debug, Clone)]
pub struct AblationScale {
    pub bands: BandConfig,
    pub in_channels: usize,
    pub num_sources: usize,
    pub ca_compress_dim: usize,
    pub ca_heads: usize,
    pub mamba_compress_dim: usize,
    pub mamba_state_dim: usize,
    pub separator: SeparatorConfig,
}

impl AblationScale {
    /// Test-sized grid: every row builds and steps in milliseconds.
    pub fn tiny(bands: BandConfig) -> Self {
        AblationScale {
            bands,
            in_channels: 2,
            num_sources: 1,
            ca_compress_dim: 4,
            ca_heads: 2,
            mamba_compress_dim: 4,
            mamba_state_dim: 2,
            separator: SeparatorConfig::new(1, 8, 2, 4),
        }
    }

    /// Published small scale.
    pub fn small(bands: BandConfig) -> Self {
        AblationScale {
            bands,
            in_channels: 4,
            num_sources: 4,
            ca_compress_dim: 64,
            ca_heads: 4,
            mamba_compress_dim: 32,
            mamba_state_dim: 8,
            separator: SeparatorConfig::small(),
        }
    }
}

pub fn ablation_config(id: &str, s: &AblationScale) -> Result<ModelConfig> {
    let d = s.separator.feature_dim;
    let bs = |bands: BandConfig| {
        CodecConfig::Bs(BsConfig {
            bands,
            in_channels: s.in_channels,
            feature_dim: d,
            num_sources: s.num_sources,
            hidden_layers: 1,
        })
    };
    let ca = || {
        CaConfig::new(s.bands.clone(), s.in_channels, d, s.ca_compress_dim, s.ca_heads, s.num_sources)
    };
    let mamba = || {
        let mut c =
            MambaConfig::new(s.bands.clone(), s.in_channels, d, s.mamba_compress_dim, s.num_sources);
        c.state_dim = s.mamba_state_dim;
        c
    };
    let codec = match id {
        // Every sub-module sees the whole spectrum; the band structure is gone.
        "e1" => bs(gen_full(s.bands.f_bins, s.bands.k())?),
        "e2" => bs(s.bands.clone()),
        "e3" => {
            let mut c = mamba();
            c.strategy = InterleaveStrategy::Tail;
            CodecConfig::SfcMamba(c)
        }
        "e4" => {
            let mut c = mamba();
            c.strategy = InterleaveStrategy::BandStartEnd;
            CodecConfig::SfcMamba(c)
        }
        "e5" | "f1" => CodecConfig::SfcMamba(mamba()),
        "e6" => {
            let mut c = ca();
            c.learn_p = false;
            c.pos_bias_init = PosBiasInit::Zero;
            CodecConfig::SfcCa(c)
        }
        "e7" => {
            let mut c = ca();
            c.pos_bias_init = PosBiasInit::Zero;
            CodecConfig::SfcCa(c)
        }
        "e8" => {
            let mut c = ca();
            c.learn_p = false;
            CodecConfig::SfcCa(c)
        }
        "e9" => {
            let mut c = ca();
            c.learn_p = false;
            c.learn_gamma = true;
            CodecConfig::SfcCa(c)
        }
        "e10" | "f4" => CodecConfig::SfcCa(ca()),
        "e11" => {
            let mut c = ca();
            c.learn_gamma = true;
            CodecConfig::SfcCa(c)
        }
        "f2" => {
            let mut c = mamba();
            c.query_mode = QueryMode::Learnable;
            CodecConfig::SfcMamba(c)
        }
        "f3" => {
            let mut c = ca();
            c.query_mode = QueryMode::Adaptive;
            CodecConfig::SfcCa(c)
        }
        other => return Err(SfcError::Config(format!("unknown ablation id `{other}`"))),
    };
    Ok(ModelConfig { codec, separator: s.separator.clone() })
}
