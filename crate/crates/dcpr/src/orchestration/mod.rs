//! Training orchestration: stage loops, checkpointing, and the three-tier
//! pipeline.
//!
//! The tiers run in order — cloud (categories), edge (one model per
//! region), device (one patch per user per region) — each consuming the
//! split produced by [`crate::data::build_tier_splits`] and freezing the
//! tier below it. Everything is seeded: per-stage RNGs derive from the run
//! seed and a stable job identity, so region and device jobs can run in
//! parallel without affecting results.

mod checkpoint;
mod pipeline;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, global_from_checkpoint, load_checkpoint,
    patch_from_checkpoint, region_from_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
    CheckpointKind,
};
pub use pipeline::{
    device_stage, global_stage, prepare_context, region_stage, run_pipeline, DeviceOutcome,
    DevicePatch, DeviceStageResult, FreezeAudit, PipelineConfig, PipelineContext, PipelineOutcome,
    PipelineReport, RegionOutcome, RegionStageResult, TimingReport, TrainMode,
};
pub use train::{train_device, train_global, train_region};

use std::collections::HashMap;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{CheckIn, CheckInDataset, DataError, RegionMap, TierSplits};
use crate::denoisers::{ModelError, RegionPoi, TrainingExample};
use crate::diffusion::DiffusionError;
use crate::numerics::{Matrix, Real, Rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{stage}: loss diverged at epoch {epoch} (train {train_loss}, val {val_loss})")]
    Diverged { stage: String, epoch: usize, train_loss: f64, val_loss: f64 },
    #[error("{stage}: no training examples")]
    NoExamples { stage: String },
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Hyperparameters shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Diffusion steps in the full chain.
    pub t_max: usize,
    /// Steps in the accelerated inference chain.
    pub t_r: usize,
    /// Noise-schedule offset.
    pub w: f64,
    /// Embedding / model width.
    pub dim: usize,
    /// SGD learning rate.
    pub eta: f64,
    /// Diffusion-state injection strength.
    pub lambda: f64,
    /// Category-embedding mix-in weight at the region tier.
    pub gamma: f64,
    /// Dropout rate on attention probabilities during training.
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience, in epochs without a new best validation
    /// loss.
    pub patience: usize,
    /// Negative samples per training example.
    pub negatives: usize,
    /// First-layer scale of the near-identity patch initialization.
    pub patch_init_scale: f64,
    /// Distance clip for the spatiotemporal bias, km.
    pub clip_km: f64,
    /// Time-gap clip for the spatiotemporal bias, hours.
    pub clip_hours: f64,
    /// Run seed; every stage derives its own stream from this.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_max: 1024,
            t_r: 16,
            w: 1e-4,
            dim: 64,
            eta: 0.002,
            lambda: 0.003,
            gamma: 0.7,
            dropout: 0.2,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            negatives: 64,
            patch_init_scale: 0.02,
            clip_km: 100.0,
            clip_hours: 168.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.t_r < 1 || self.t_r > self.t_max {
            return bad(format!("t_r must be in [1, t_max], got {}", self.t_r));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive".into());
        }
        if self.negatives == 0 {
            return bad("negatives must be positive".into());
        }
        if !(self.patch_init_scale > 0.0 && self.patch_init_scale <= 1.0) {
            return bad(format!("patch_init_scale must be in (0, 1], got {}", self.patch_init_scale));
        }
        if !(self.clip_km > 0.0 && self.clip_hours > 0.0) {
            return bad("clip_km and clip_hours must be positive".into());
        }
        if !self.lambda.is_finite() || !self.gamma.is_finite() {
            return bad("lambda and gamma must be finite".into());
        }
        // t_max and w are fully validated by the schedule constructor.
        crate::diffusion::NoiseSchedule::build(self.t_max, self.w)?;
        Ok(())
    }
}

/// One epoch's losses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Summary of one training stage (one model).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub n_train_examples: usize,
    pub n_val_examples: usize,
    pub epochs_run: usize,
    /// Epoch with the lowest validation loss; its weights are the ones
    /// kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_train_loss: f64,
    pub history: Vec<EpochStats>,
    pub warnings: Vec<String>,
}

/// Hex SHA-256 over the named tensors: name bytes, dims, then the values
/// in little-endian order. Used for checkpoint integrity and freeze
/// audits.
pub fn tensor_digest<F: Real>(tensors: &[(String, &Matrix<F>)]) -> String {
    let mut hasher = Sha256::new();
    for (name, m) in tensors {
        hasher.update(name.as_bytes());
        hasher.update((m.rows() as u32).to_le_bytes());
        hasher.update((m.cols() as u32).to_le_bytes());
        let mut buf = Vec::with_capacity(m.data().len() * F::BYTES);
        for v in m.data() {
            v.write_le(&mut buf);
        }
        hasher.update(&buf);
    }
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

/// Expand one item sequence into next-item prediction examples: one per
/// position from the second onward, each with the full preceding prefix as
/// history.
pub fn expand_prefixes(items: &[usize], timestamps: Option<&[i64]>) -> Vec<TrainingExample> {
    let mut out = Vec::new();
    for i in 1..items.len() {
        out.push(TrainingExample {
            history: items[..i].to_vec(),
            target: items[i],
            timestamps: timestamps.map(|ts| ts[..i].to_vec()),
        });
    }
    out
}

/// Cloud-tier examples: prefix expansion of every category sequence.
pub fn global_examples(splits: &TierSplits) -> Vec<TrainingExample> {
    splits.global.iter().flat_map(|seq| expand_prefixes(seq, None)).collect()
}

/// A region's POI universe: dataset POIs assigned to the region, in
/// ascending external-id order, with a map from dataset POI index to the
/// region-local row used by the region model.
#[derive(Clone, Debug)]
pub struct RegionVocab {
    pub region: u32,
    pub pois: Vec<RegionPoi>,
    to_local: HashMap<usize, usize>,
}

impl RegionVocab {
    pub fn build(ds: &CheckInDataset, regions: &RegionMap, region: u32) -> Self {
        let mut rows: Vec<(usize, &crate::data::Poi)> = ds
            .pois
            .iter()
            .enumerate()
            .filter(|(i, _)| regions.region_of(*i) == region)
            .collect();
        rows.sort_by_key(|(_, p)| p.external_id);
        let mut pois = Vec::with_capacity(rows.len());
        let mut to_local = HashMap::with_capacity(rows.len());
        for (local, (global, p)) in rows.into_iter().enumerate() {
            to_local.insert(global, local);
            pois.push(RegionPoi {
                external_id: p.external_id,
                category_row: ds.poi_category[global],
                lat: p.lat,
                lon: p.lon,
            });
        }
        RegionVocab { region, pois, to_local }
    }

    /// A vocabulary straight from a POI table, when there is no dataset to
    /// derive it from (checkpoint loading, synthetic fixtures). Local rows
    /// double as the dataset indices.
    pub fn from_pois(region: u32, pois: Vec<RegionPoi>) -> Self {
        let to_local = (0..pois.len()).map(|i| (i, i)).collect();
        RegionVocab { region, pois, to_local }
    }

    pub fn n_pois(&self) -> usize {
        self.pois.len()
    }

    pub fn local_row(&self, dataset_poi: usize) -> Option<usize> {
        self.to_local.get(&dataset_poi).copied()
    }

    /// A check-in sequence as (region-local rows, timestamps). Panics if a
    /// check-in is outside this region — the splits guarantee it is not.
    pub fn localize(&self, checkins: &[CheckIn]) -> (Vec<usize>, Vec<i64>) {
        let rows = checkins
            .iter()
            .map(|c| self.local_row(c.poi).expect("check-in outside its region"))
            .collect();
        let ts = checkins.iter().map(|c| c.timestamp).collect();
        (rows, ts)
    }

    /// Prefix-expanded training examples for one localized sequence.
    pub fn to_examples(&self, checkins: &[CheckIn]) -> Vec<TrainingExample> {
        let (rows, ts) = self.localize(checkins);
        expand_prefixes(&rows, Some(&ts))
    }
}

/// The device tier's leave-the-last-two-out split of one localized
/// sequence: training examples target every position up to the
/// antepenultimate, the penultimate event is the validation target, the
/// last is the held-out test target. Sequences of length 3 yield no
/// training examples.
pub struct DeviceSplit {
    pub train: Vec<TrainingExample>,
    pub val: TrainingExample,
    pub test: TrainingExample,
}

pub fn device_split(rows: &[usize], timestamps: &[i64]) -> Option<DeviceSplit> {
    let n = rows.len();
    if n < 3 {
        return None;
    }
    let example = |target_idx: usize| TrainingExample {
        history: rows[..target_idx].to_vec(),
        target: rows[target_idx],
        timestamps: Some(timestamps[..target_idx].to_vec()),
    };
    let train = (1..n - 2).map(example).collect();
    Some(DeviceSplit { train, val: example(n - 2), test: example(n - 1) })
}

/// Shuffle and split examples into (train, validation). At least one
/// example lands on each side when two or more exist; a single example is
/// used for both sides (with a warning left to the caller's judgement).
pub fn holdout_split(
    mut examples: Vec<TrainingExample>,
    val_fraction: f64,
    seed: u64,
) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    assert!((0.0..1.0).contains(&val_fraction));
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut examples);
    let n = examples.len();
    if n <= 1 {
        let val = examples.clone();
        return (examples, val);
    }
    let n_val = ((n as f64 * val_fraction + 0.5).floor() as usize).clamp(1, n - 1);
    let val = examples.split_off(n - n_val);
    (examples, val)
}

/// Uniform negatives over the vocabulary, never equal to the target.
pub fn sample_negatives(
    rng: &mut Rng,
    vocab: usize,
    target: usize,
    count: usize,
) -> Result<Vec<usize>, ModelError> {
    if vocab < 2 || count == 0 {
        return Err(ModelError::NoNegatives);
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let c = rng.below(vocab);
        if c != target {
            out.push(c);
        }
    }
    Ok(out)
}
