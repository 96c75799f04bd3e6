//! Query/feature interleaving for the scan codec.
//!
//! A plan fixes where each of the K query tokens sits inside the length
//! `F + K` scan sequence. Slots are positions in the *natural* (ascending
//! frequency) sequence; a backward scan reverses the whole sequence at scan
//! time, so one plan serves both tensor layouts. Query slots strictly
//! increase with k in every plan.
//!
//! Strategies:
//! * `Tail` — all queries after all features; any band layout.
//! * `BandStartEnd` — the query trails its band in scan order: forward scans
//!   put query k right after bin `g_e - 1`, backward scans right after bin
//!   `g_s` (seen from the scan's own direction). Decoder plans swap the two
//!   directions so the decoder re-reads the sequence the opposite way the
//!   encoder wrote it.
//! * `BandMiddle` — query k after the band's middle bin, identical for all
//!   directions and stages.
//!
//! `BandStartEnd` and `BandMiddle` require the bands to partition the
//! spectrum (contiguous, non-overlapping): with shared bins a query would
//! have no single band end to follow.

use super::{Direction, InterleaveStrategy, Stage};
use crate::bands::BandConfig;
use crate::error::{Result, SfcError};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterleavePlan {
    /// Natural-order slot of query k.
    pub query_slots: Vec<usize>,
    /// Natural-order slot of feature (bin) f.
    pub feature_slots: Vec<usize>,
    pub strategy: InterleaveStrategy,
    pub direction: Direction,
    pub stage: Stage,
}

impl InterleavePlan {
    pub fn len(&self) -> usize {
        self.query_slots.len() + self.feature_slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Structured-text dump for inspection: one line of context, then one
    /// line per slot in scan order.
    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = format!(
            "strategy={:?} direction={:?} stage={:?} features={} queries={}\n",
            self.strategy,
            self.direction,
            self.stage,
            self.feature_slots.len(),
            self.query_slots.len()
        );
        let f = self.feature_slots.len();
        for (slot, &src) in self.perm().iter().enumerate() {
            if src < f {
                writeln!(s, "slot={slot} feature={src}").expect("string write");
            } else {
                writeln!(s, "slot={slot} query={}", src - f).expect("string write");
            }
        }
        s
    }

    /// `perm[slot] = index into [features | queries]` — the gather that
    /// realizes this plan after concatenation.
    pub fn perm(&self) -> Vec<usize> {
        let f = self.feature_slots.len();
        let mut perm = vec![0usize; self.len()];
        for (i, &s) in self.feature_slots.iter().enumerate() {
            perm[s] = i;
        }
        for (k, &s) in self.query_slots.iter().enumerate() {
            perm[s] = f + k;
        }
        perm
    }
}

fn require_partition(bands: &BandConfig, strategy: InterleaveStrategy) -> Result<()> {
    let mut expect = 0;
    for b in &bands.bands {
        if b.g_s != expect {
            return Err(SfcError::Bands(format!(
                "{strategy:?} interleaving needs contiguous non-overlapping bands; \
                 band [{}, {}) does not start at {expect}",
                b.g_s, b.g_e
            )));
        }
        expect = b.g_e;
    }
    if expect != bands.f_bins {
        return Err(SfcError::Bands(format!(
            "{strategy:?} interleaving needs bands covering exactly [0, {}); they end at {expect}",
            bands.f_bins
        )));
    }
    Ok(())
}

/// Slot layout for one (strategy, direction, stage) combination.
///
/// `compat_literal_insert` shifts backward `BandStartEnd` queries one slot
/// later (after the band's first bin instead of before it), matching a
/// literal insert-at-index reading of the construction.
pub fn build_interleave_plan(
    bands: &BandConfig,
    strategy: InterleaveStrategy,
    direction: Direction,
    stage: Stage,
    compat_literal_insert: bool,
) -> Result<InterleavePlan> {
    let (f_bins, k) = (bands.f_bins, bands.k());
    // The decoder consumes the interleaved sequence opposite to how the
    // encoder produced it, so its plans are the encoder's, directions swapped.
    let eff = match (stage, direction) {
        (Stage::Encoder, d) => d,
        (Stage::Decoder, Direction::Fwd) => Direction::Bwd,
        (Stage::Decoder, Direction::Bwd) => Direction::Fwd,
    };
    let query_slots: Vec<usize> = match strategy {
        InterleaveStrategy::Tail => (f_bins..f_bins + k).collect(),
        InterleaveStrategy::BandStartEnd => {
            require_partition(bands, strategy)?;
            bands
                .bands
                .iter()
                .enumerate()
                .map(|(i, b)| match eff {
                    Direction::Fwd => b.g_e + i,
                    Direction::Bwd => b.g_s + i + usize::from(compat_literal_insert),
                })
                .collect()
        }
        InterleaveStrategy::BandMiddle => {
            require_partition(bands, strategy)?;
            bands
                .bands
                .iter()
                .enumerate()
                .map(|(i, b)| (b.g_s + b.g_e + 1) / 2 + i)
                .collect()
        }
    };
    let mut is_query = vec![false; f_bins + k];
    for &s in &query_slots {
        is_query[s] = true;
    }
    let feature_slots: Vec<usize> =
        (0..f_bins + k).filter(|&s| !is_query[s]).collect();
    Ok(InterleavePlan { query_slots, feature_slots, strategy, direction, stage })
}

/// Merge `features (..., F)` and `queries (..., K)` into the plan's
/// `(..., F + K)` sequence.
pub fn interleave<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    queries: Var,
    plan: &InterleavePlan,
) -> Result<Var> {
    let rank = tape.shape(features).len();
    let cat = tape.concat(&[features, queries], rank - 1)?;
    tape.gather_last(cat, &plan.perm())
}

/// Pull the tokens at `slots` back out of an interleaved sequence
/// (`plan.query_slots` or `plan.feature_slots`).
pub fn extract<T: Scalar>(tape: &mut Tape<T>, seq: Var, slots: &[usize]) -> Result<Var> {
    tape.gather_last(seq, slots)
}
