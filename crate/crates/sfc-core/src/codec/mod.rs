//! Spectral feature codecs: the band-split baseline and the two compression
//! variants (cross-attention and bidirectional interleaved scan). All three
//! share one interface: `encode` maps a complex spectrogram `(2M, F, T)` to a
//! compressed feature grid `(D, K, T)`, and `decode` maps the separator's
//! output back to per-source complex masks `(N, 2M, F, T)`.

pub mod bs;
pub mod ca;
pub mod interleave;
pub mod mamba;
pub mod pos_bias;

pub use bs::{BsCodec, BsConfig};
pub use ca::{adaptive_query, attention_spectrogram, cross_attention, CaCodec, CaConfig};
pub use interleave::{build_interleave_plan, extract, interleave, InterleavePlan};
pub use mamba::{MambaCodec, MambaConfig, SsmLayer};
pub use pos_bias::{build_pos_bias, PosBias};

use crate::error::Result;
use crate::nn::Params;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// How codec queries are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// A free parameter per query slot, identical for every frame.
    #[default]
    Learnable,
    /// Computed from the input features per frame (weighted band averages for
    /// the encoder, a feed-forward of encoder features for the decoder).
    Adaptive,
}

/// Attention logit scaling: standard per-head `1/sqrt(D'/H)`, or the flat
/// `1/sqrt(D')` the compression formula writes literally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    #[default]
    PerHead,
    LiteralDPrime,
}

/// Positional-bias initialization: banded distance profile or all zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosBiasInit {
    #[default]
    Distance,
    Zero,
}

/// Where scan queries are inserted relative to each band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterleaveStrategy {
    /// All queries after all features (no positional structure).
    Tail,
    /// Query k after the last feature of band k in scan order.
    BandStartEnd,
    /// Query k after the band's midpoint feature, both directions alike.
    #[default]
    BandMiddle,
}

/// Scan / plan direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Fwd,
    Bwd,
}

/// Which half of the codec a plan serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Decoder,
}

/// Encoder output: the compressed grid plus whatever the matching decoder or
/// an analysis export needs from the same pass.
pub struct Encoded {
    /// Compressed features `(D, K, T)`.
    pub z: Var,
    pub aux: EncodeAux,
}

pub enum EncodeAux {
    None,
    /// Per-frame attention weights `(H, K, F)` in frame order, plus the
    /// pre-compression features `(D', F, T)` adaptive decoder queries read.
    Ca { weights: Vec<Var>, pre_features: Var },
    /// Per-direction scan outputs at feature slots `(D', F, T)`; the decoder
    /// derives its queries from these.
    ScanFeatures { fwd: Var, bwd: Var },
}

/// Common interface of the three codecs.
pub trait Codec<T: Scalar>: Params<T> {
    fn encode(&self, tape: &mut Tape<T>, x: Var) -> Result<Encoded>;
    fn decode(&self, tape: &mut Tape<T>, z: Var, enc: &Encoded) -> Result<Var>;
    /// Non-learnable tensors that still shape the computation (fixed bias
    /// matrices, fixed slopes); hashed into the model signature.
    fn extra_buffers(&self) -> Vec<(String, Tensor<T>)> {
        Vec::new()
    }
    fn feature_dim(&self) -> usize;
    fn num_bands(&self) -> usize;
    fn f_bins(&self) -> usize;
    fn num_sources(&self) -> usize;
    fn in_channels(&self) -> usize;
}
