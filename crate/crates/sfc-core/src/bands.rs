//! Band configurations: which frequency bins each sub-encoder/sub-decoder owns.
//!
//! Indices are 0-based half-open everywhere inside the crate: band `k` covers
//! bins `g_s..g_e`, so `|G_k| = g_e - g_s`. Band files may declare a 1-based
//! inclusive convention and are converted on load.
//!
//! Three generators are provided: `gen_uniform` (equal split, control
//! configuration), `gen_full` (every band sees all of `[0, F)`), and
//! `gen_log12tet`, a semitone-geometric stand-in for externally defined
//! musical-scale tables. The exact published musical table is not
//! reconstructed here — `load` accepts it as a file when available.

use crate::error::{Result, SfcError};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Half-open bin range `[g_s, g_e)` owned by one band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Band {
    pub g_s: usize,
    pub g_e: usize,
}

impl Band {
    pub fn new(g_s: usize, g_e: usize) -> Self {
        Band { g_s, g_e }
    }

    /// Bandwidth `|G_k|`.
    pub fn width(&self) -> usize {
        self.g_e - self.g_s
    }

    pub fn contains(&self, f: usize) -> bool {
        self.g_s <= f && f < self.g_e
    }

    pub fn bins(&self) -> std::ops::Range<usize> {
        self.g_s..self.g_e
    }
}

/// An ordered list of bands covering `[0, F)`. Overlap is permitted; gaps are
/// not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandConfig {
    pub name: String,
    pub f_bins: usize,
    pub bands: Vec<Band>,
}

impl BandConfig {
    /// Builds and validates in one step.
    pub fn new(name: impl Into<String>, f_bins: usize, bands: Vec<Band>) -> Result<Self> {
        let cfg = BandConfig { name: name.into(), f_bins, bands };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.bands.len()
    }

    /// Σ_k |G_k|. Equals `f_bins` iff the bands are disjoint.
    pub fn sum_widths(&self) -> usize {
        self.bands.iter().map(Band::width).sum()
    }

    /// Index of the first band containing bin `f`, if any.
    pub fn first_band_containing(&self, f: usize) -> Option<usize> {
        self.bands.iter().position(|b| b.contains(f))
    }

    /// Coverage, ordering, and range invariants. Every bin in `[0, F)` must
    /// belong to at least one band; bands must be sorted by start bin.
    pub fn validate(&self) -> Result<()> {
        if self.bands.is_empty() {
            return Err(SfcError::Bands("no bands (K must be >= 1)".into()));
        }
        if self.f_bins == 0 {
            return Err(SfcError::Bands("F must be >= 1".into()));
        }
        for (k, b) in self.bands.iter().enumerate() {
            if b.g_s >= b.g_e {
                return Err(SfcError::Bands(format!(
                    "band {k}: empty range [{}, {})",
                    b.g_s, b.g_e
                )));
            }
            if b.g_e > self.f_bins {
                return Err(SfcError::Bands(format!(
                    "band {k}: end {} exceeds F={}",
                    b.g_e, self.f_bins
                )));
            }
        }
        for k in 1..self.bands.len() {
            if self.bands[k].g_s < self.bands[k - 1].g_s {
                return Err(SfcError::Bands(format!(
                    "bands not sorted by start: band {} starts at {} after band {} at {}",
                    k,
                    self.bands[k].g_s,
                    k - 1,
                    self.bands[k - 1].g_s
                )));
            }
        }
        // Coverage check exploiting the sort: track the furthest end seen.
        let mut covered_to = 0usize;
        for b in &self.bands {
            if b.g_s > covered_to {
                return Err(SfcError::Bands(format!(
                    "coverage gap at bin {covered_to}"
                )));
            }
            covered_to = covered_to.max(b.g_e);
        }
        if covered_to < self.f_bins {
            return Err(SfcError::Bands(format!("coverage gap at bin {covered_to}")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = BandFile::from_config(self);
        let text = toml::to_string(&file)
            .map_err(|e| SfcError::Format { what: "band file", detail: e.to_string() })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: BandFile = toml::from_str(text)
            .map_err(|e| SfcError::Format { what: "band file", detail: e.to_string() })?;
        file.into_config()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(&BandFile::from_config(self))
            .map_err(|e| SfcError::Format { what: "band file", detail: e.to_string() })
    }
}

/// Index convention declared by a band file. Internally everything is
/// `ZeroBasedHalfOpen`; `OneBasedInclusive` rows `[s, e]` convert as
/// `[s-1, e)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    ZeroBasedHalfOpen,
    OneBasedInclusive,
}

/// On-disk schema: `{name, F, convention, bands = [[s, e], ...]}`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BandFile {
    name: String,
    #[serde(rename = "F")]
    f_bins: usize,
    convention: Convention,
    bands: Vec<[i64; 2]>,
}

impl BandFile {
    fn from_config(cfg: &BandConfig) -> Self {
        BandFile {
            name: cfg.name.clone(),
            f_bins: cfg.f_bins,
            convention: Convention::ZeroBasedHalfOpen,
            bands: cfg.bands.iter().map(|b| [b.g_s as i64, b.g_e as i64]).collect(),
        }
    }

    fn into_config(self) -> Result<BandConfig> {
        let mut bands = Vec::with_capacity(self.bands.len());
        for (k, row) in self.bands.iter().enumerate() {
            let [s, e] = *row;
            let (g_s, g_e) = match self.convention {
                Convention::ZeroBasedHalfOpen => (s, e),
                Convention::OneBasedInclusive => (s - 1, e),
            };
            if g_s < 0 || g_e < 0 {
                return Err(SfcError::Bands(format!(
                    "band {k}: negative bin index after convention conversion"
                )));
            }
            bands.push(Band::new(g_s as usize, g_e as usize));
        }
        BandConfig::new(self.name, self.f_bins, bands)
    }
}

/// Contiguous equal split: K non-overlapping bands of width ⌈F/K⌉ or ⌊F/K⌋,
/// wider bands first.
pub fn gen_uniform(f_bins: usize, k: usize) -> Result<BandConfig> {
    if k == 0 {
        return Err(SfcError::Bands("K must be >= 1".into()));
    }
    if k > f_bins {
        return Err(SfcError::Bands(format!("K={k} exceeds F={f_bins}")));
    }
    let wide = f_bins % k; // this many bands get an extra bin
    let base = f_bins / k;
    let mut bands = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let w = base + usize::from(i < wide);
        bands.push(Band::new(start, start + w));
        start += w;
    }
    BandConfig::new(format!("uniform-F{f_bins}-K{k}"), f_bins, bands)
}

/// K identical bands `[0, F)` — the "full split" ablation where every
/// sub-encoder sees the whole spectrum.
pub fn gen_full(f_bins: usize, k: usize) -> Result<BandConfig> {
    if k == 0 {
        return Err(SfcError::Bands("K must be >= 1".into()));
    }
    let bands = vec![Band::new(0, f_bins); k];
    BandConfig::new(format!("full-F{f_bins}-K{k}"), f_bins, bands)
}

/// Semitone-geometric band split with a linear low-frequency region.
///
/// Disjoint segment edges follow `f_{n+1} = f_n * r` (r a fixed frequency
/// ratio, i.e. a constant number of semitones per step) wherever that step
/// spans at least one bin; below that crossover the edges advance one bin at
/// a time. Because bin centers are linear in Hz with zero offset, the walk is
/// scale-free in bin space; `sample_rate` and `n_fft` are recorded in the
/// config name for interpretation. The ratio is bisected so the segment count
/// is exactly `target_k`, and each band then spans its own segment plus the
/// segment below (clamped at the edges), mirroring the overlap of published
/// musical tables. Segment widths are non-decreasing by construction, so band
/// widths are too.
pub fn gen_log12tet(
    f_bins: usize,
    target_k: usize,
    sample_rate: u32,
    n_fft: usize,
) -> Result<BandConfig> {
    let (edges, ratio) = log12tet_edges(f_bins, target_k)?;
    let bands = overlap_bands_from_edges(&edges);
    let semitones = 12.0 * ratio.log2();
    let mut cfg = BandConfig::new(
        format!("log12tet-F{f_bins}-K{target_k}-sr{sample_rate}-nfft{n_fft}"),
        f_bins,
        bands,
    )?;
    // Stash the resolution in the name so reports can echo it.
    cfg.name = format!("{}-st{semitones:.3}", cfg.name);
    Ok(cfg)
}

/// Disjoint segment edges `0 = e_0 < ... < e_K = F` for `gen_log12tet`,
/// together with the bisected frequency ratio. Exposed so tests can recompute
/// the walk independently from the returned ratio.
pub fn log12tet_edges(f_bins: usize, target_k: usize) -> Result<(Vec<usize>, f64)> {
    if target_k < 2 {
        return Err(SfcError::Bands("target_K must be >= 2".into()));
    }
    if target_k > f_bins {
        return Err(SfcError::Bands(format!(
            "target_K={target_k} unreachable for F={f_bins}: achievable range is 2..={f_bins}"
        )));
    }
    // Segment count is non-increasing in the ratio: r -> 1 gives F width-1
    // segments, r -> F gives 2. Bisect for an exact hit.
    let mut lo = 1.0 + 1e-12; // count(lo) = F >= target_k
    let mut hi = f_bins as f64; // count(hi) = 2 <= target_k
    if segment_walk(f_bins, lo).len() - 1 == target_k {
        let edges = segment_walk(f_bins, lo);
        return Ok((edges, lo));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if segment_walk(f_bins, mid).len() - 1 >= target_k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for r in [lo, hi] {
        let edges = segment_walk(f_bins, r);
        if edges.len() - 1 == target_k {
            return Ok((edges, r));
        }
    }
    let below = segment_walk(f_bins, hi).len() - 1;
    let above = segment_walk(f_bins, lo).len() - 1;
    Err(SfcError::Bands(format!(
        "target_K={target_k} unreachable for F={f_bins}: \
         nearest achievable counts are {below} and {above}"
    )))
}

/// Edge walk for one ratio: step geometrically, never by less than one bin,
/// and fold the clamped tail back until the last segment is at least as wide
/// as its predecessor (keeps segment widths non-decreasing).
fn segment_walk(f_bins: usize, ratio: f64) -> Vec<usize> {
    let mut edges = vec![0usize];
    let mut b = 0usize;
    loop {
        let geo = (b as f64 * ratio).round() as usize;
        let next = geo.max(b + 1);
        if next >= f_bins {
            break;
        }
        edges.push(next);
        b = next;
    }
    edges.push(f_bins);
    while edges.len() >= 3 {
        let n = edges.len();
        let last = edges[n - 1] - edges[n - 2];
        let prev = edges[n - 2] - edges[n - 3];
        if last >= prev {
            break;
        }
        edges.remove(n - 2);
    }
    edges
}

/// Band k spans segment k plus the segment below it: `[e_{max(k-1,0)}, e_{k+1})`.
fn overlap_bands_from_edges(edges: &[usize]) -> Vec<Band> {
    let k = edges.len() - 1;
    (0..k)
        .map(|i| Band::new(edges[i.saturating_sub(1)], edges[i + 1]))
        .collect()
}
