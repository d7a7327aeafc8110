//! Tier splits: one corpus becomes the global category stream, per-region
//! edge pools, and per-user device sequences.
//!
//! The privacy ordering is structural: the global tier never sees the final
//! two events of any user (those are exactly the on-device validation and
//! test targets), and edge pools are anonymized region subsequences.

use log::warn;

use super::{CheckIn, CheckInDataset, DataError, RegionMap, MAX_SEQ_LEN, MIN_DEVICE_LEN};
use crate::numerics::{derive_seed, Rng};

/// One user's check-ins inside one region; the on-device training unit.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceSequence {
    /// Dense user index (never leaves the device tier).
    pub user: usize,
    pub region: u32,
    /// Chronological, truncated to the most recent [`MAX_SEQ_LEN`] events.
    pub checkins: Vec<CheckIn>,
}

/// Everything one region's edge server trains on, plus its devices.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionSplit {
    pub region: u32,
    /// Anonymized sequences for edge training (no user attached).
    pub edge_sequences: Vec<Vec<CheckIn>>,
    pub device_sequences: Vec<DeviceSequence>,
}

/// Output of [`build_tier_splits`].
#[derive(Clone, Debug, PartialEq)]
pub struct TierSplits {
    /// Per-user category sequences (dense category indices) with the final
    /// two events removed; the cloud tier's training stream.
    pub global: Vec<Vec<usize>>,
    /// One entry per region that has any usable sequence.
    pub regions: Vec<RegionSplit>,
}

/// Split a dataset across the three tiers.
///
/// Per user and region, the user's region subsequence (truncated to the
/// most recent [`MAX_SEQ_LEN`] events) lands either in the region's edge
/// pool (with probability mass `fraction`, seeded shuffle then count split)
/// or stays on the device. Device sequences shorter than
/// [`MIN_DEVICE_LEN`] are dropped with a warning — they cannot hold a
/// train/validation/test split.
pub fn build_tier_splits(
    ds: &CheckInDataset,
    regions: &RegionMap,
    fraction: f64,
    seed: u64,
) -> Result<TierSplits, DataError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(DataError::BadFraction { fraction });
    }

    // Global tier: category sequences minus each user's final two events.
    let mut global = Vec::new();
    for user in 0..ds.n_users() {
        let cats = ds.category_sequence(user);
        let start = cats.len().saturating_sub(MAX_SEQ_LEN);
        let truncated = &cats[start..];
        if truncated.len() > 2 {
            let kept = &truncated[..truncated.len() - 2];
            if kept.len() >= 2 {
                global.push(kept.to_vec());
            }
        }
    }

    // Region subsequences, in (user, region-first-seen) order so the pool
    // layout is deterministic before the seeded shuffle.
    let mut region_splits = Vec::new();
    for region in 0..regions.k() as u32 {
        let mut pool: Vec<(usize, Vec<CheckIn>)> = Vec::new();
        for user in 0..ds.n_users() {
            let sub: Vec<CheckIn> = ds.sequences[user]
                .iter()
                .filter(|c| regions.region_of(c.poi) == region)
                .copied()
                .collect();
            if sub.len() < 2 {
                continue; // nothing learnable: no (history, target) pair
            }
            let start = sub.len().saturating_sub(MAX_SEQ_LEN);
            pool.push((user, sub[start..].to_vec()));
        }
        if pool.is_empty() {
            warn!("region {region}: no usable sequences; skipping");
            continue;
        }

        let mut rng = Rng::new(derive_seed(seed, "tier-split", region as u64));
        rng.shuffle(&mut pool);
        let n_edge = (fraction * pool.len() as f64 + 0.5).floor() as usize;
        let n_edge = n_edge.min(pool.len());

        let mut edge_sequences = Vec::with_capacity(n_edge);
        let mut device_sequences = Vec::new();
        for (i, (user, seq)) in pool.into_iter().enumerate() {
            if i < n_edge {
                edge_sequences.push(seq);
            } else if seq.len() >= MIN_DEVICE_LEN {
                device_sequences.push(DeviceSequence { user, region, checkins: seq });
            } else {
                warn!(
                    "region {region}: user {user} has only {} region events; \
                     too short for on-device train/val/test, skipping",
                    seq.len()
                );
            }
        }
        region_splits.push(RegionSplit { region, edge_sequences, device_sequences });
    }

    Ok(TierSplits { global, regions: region_splits })
}
