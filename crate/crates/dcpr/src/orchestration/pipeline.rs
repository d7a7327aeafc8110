//! The end-to-end three-tier pipeline.
//!
//! `run_pipeline` strings the stages together: region discovery, tier
//! splitting, the cloud stage, one edge job per region, one device job per
//! (user, region) sequence. Region and device jobs run in parallel; each
//! derives its own RNG stream from the run seed and its stable identity,
//! and all outputs are sorted by that identity, so the artifacts are
//! byte-identical regardless of thread count or completion order.
//!
//! The same stage functions are exposed individually so the stages can be
//! run one at a time (the CLI does) with bit-identical results.
//!
//! Everything wall-clock lives in [`TimingReport`], kept apart from
//! [`PipelineReport`] — the former varies run to run, the latter is part
//! of the deterministic output surface.

use std::collections::HashMap;
use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use super::train::{stage_seed, train_device, train_global, train_region, VAL_FRACTION};
use super::{
    device_split, global_examples, holdout_split, tensor_digest, RegionVocab, StageReport,
    TrainConfig, TrainError,
};
use crate::data::{build_tier_splits, partition_regions, CheckInDataset, DeviceSequence, RegionMap, RegionSplit, TierSplits};
use crate::denoisers::{GlobalModel, PatchModel, RegionModel, TrainingExample};
use crate::diffusion::NoiseSchedule;
use crate::numerics::Rng;

/// How the edge tier gets its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TrainMode {
    /// Cloud stage first; region models specialize it with the base
    /// frozen. The standard three-tier flow.
    Pretrained,
    /// No cloud stage; every region trains all of its parameters from a
    /// random initialization. The transfer-learning ablation.
    Scratch,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Pretrained => "dcpr",
            TrainMode::Scratch => "dcpr_t",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dcpr" => Ok(TrainMode::Pretrained),
            "dcpr_t" => Ok(TrainMode::Scratch),
            other => Err(format!("unknown mode {other:?}, expected dcpr or dcpr_t")),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    /// Number of geographic regions (k of the k-means step).
    pub regions: usize,
    /// Fraction of each region's usable sequences sent to edge training;
    /// the rest stay on device.
    pub edge_fraction: f64,
    pub mode: TrainMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            regions: 4,
            edge_fraction: 0.7,
            mode: TrainMode::Pretrained,
        }
    }
}

/// Before/after digest of a parameter set that a stage promised not to
/// touch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FreezeAudit {
    pub stage: String,
    /// Which frozen tier the digest covers.
    pub tier: String,
    pub digest_before: String,
    pub digest_after: String,
    pub intact: bool,
}

impl FreezeAudit {
    fn new(stage: String, tier: &str, before: String, after: String) -> Self {
        let intact = before == after;
        FreezeAudit { stage, tier: tier.to_string(), digest_before: before, digest_after: after, intact }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionOutcome {
    pub region: u32,
    pub n_pois: usize,
    pub n_edge_sequences: usize,
    /// Absent when the region had no edge sequences to train on.
    pub report: Option<StageReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviceOutcome {
    pub user: usize,
    pub region: u32,
    pub n_events: usize,
    /// False when the sequence was too short to yield training examples;
    /// the device then keeps the plain region model.
    pub trained: bool,
    pub report: Option<StageReport>,
}

/// The deterministic run summary (serialize to `report.json`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub mode: String,
    pub seed: u64,
    /// The fully resolved configuration, sorted by key.
    pub config: Vec<(String, String)>,
    pub n_users: usize,
    pub n_pois: usize,
    pub n_categories: usize,
    pub n_checkins: usize,
    pub n_regions: usize,
    pub global: Option<StageReport>,
    pub regions: Vec<RegionOutcome>,
    pub devices: Vec<DeviceOutcome>,
    pub freeze_audits: Vec<FreezeAudit>,
    pub warnings: Vec<String>,
}

impl PipelineReport {
    /// Human-readable rendering (deterministic; `report.txt`).
    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "three-tier training run (mode {}, seed {})", self.mode, self.seed);
        let _ = writeln!(
            s,
            "dataset: {} users, {} pois, {} categories, {} check-ins, {} regions",
            self.n_users, self.n_pois, self.n_categories, self.n_checkins, self.n_regions
        );
        match &self.global {
            Some(g) => {
                let _ = writeln!(
                    s,
                    "cloud stage: {} epochs ({} train / {} val examples), best val loss {:.6} at epoch {}",
                    g.epochs_run, g.n_train_examples, g.n_val_examples, g.best_val_loss, g.best_epoch
                );
            }
            None => {
                let _ = writeln!(s, "cloud stage: skipped (edge tier trains from scratch)");
            }
        }
        for r in &self.regions {
            match &r.report {
                Some(rep) => {
                    let _ = writeln!(
                        s,
                        "region {}: {} pois, {} edge sequences, {} epochs, best val loss {:.6}",
                        r.region, r.n_pois, r.n_edge_sequences, rep.epochs_run, rep.best_val_loss
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "region {}: {} pois, no edge sequences — model left at initialization",
                        r.region, r.n_pois
                    );
                }
            }
        }
        let trained = self.devices.iter().filter(|d| d.trained).count();
        let _ = writeln!(s, "device stage: {} of {} patches trained", trained, self.devices.len());
        for d in &self.devices {
            let detail = match &d.report {
                Some(rep) => format!(
                    "{} epochs, best val loss {:.6}",
                    rep.epochs_run, rep.best_val_loss
                ),
                None => "sequence too short, patch skipped".to_string(),
            };
            let _ = writeln!(s, "  user {} region {}: {} events, {detail}", d.user, d.region, d.n_events);
        }
        let intact = self.freeze_audits.iter().filter(|a| a.intact).count();
        let _ = writeln!(s, "freeze audits: {intact}/{} intact", self.freeze_audits.len());
        for a in self.freeze_audits.iter().filter(|a| !a.intact) {
            let _ = writeln!(s, "  VIOLATION {} ({}): {} -> {}", a.stage, a.tier, a.digest_before, a.digest_after);
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Wall-clock timings. Non-deterministic by nature, so it is written to
/// its own artifact (`timing.json`) and never mixed into the report.
#[derive(Clone, Debug, Serialize)]
pub struct TimingReport {
    pub total_seconds: f64,
    pub stages: Vec<(String, f64)>,
}

/// A trained (or intentionally untrained) device patch and the held-out
/// last event it will be tested on, in region-local rows.
#[derive(Clone, Debug)]
pub struct DevicePatch {
    pub user: usize,
    pub region: u32,
    pub patch: Option<PatchModel<f32>>,
    pub test: TrainingExample,
}

/// Everything a finished run produces.
pub struct PipelineOutcome {
    pub report: PipelineReport,
    pub timing: TimingReport,
    pub global: Option<GlobalModel<f32>>,
    /// One (vocabulary, model) pair per region, ascending region id.
    pub regions: Vec<(RegionVocab, RegionModel<f32>)>,
    /// One entry per device sequence, ascending (region, user).
    pub devices: Vec<DevicePatch>,
    pub splits: TierSplits,
    pub region_map: RegionMap,
}

/// Deterministic preprocessing shared by every stage: region discovery,
/// tier splits, the noise schedule. Stage commands run this identically so
/// a stage executed on its own matches the same stage inside the full
/// pipeline bit for bit.
pub struct PipelineContext {
    pub region_map: RegionMap,
    pub splits: TierSplits,
    pub schedule: NoiseSchedule,
}

pub fn prepare_context(
    dataset: &CheckInDataset,
    cfg: &PipelineConfig,
) -> Result<PipelineContext, TrainError> {
    cfg.train.validate()?;
    let seed = cfg.train.seed;
    let region_map = partition_regions(dataset, cfg.regions, stage_seed(seed, "kmeans", 0))?;
    let splits = build_tier_splits(dataset, &region_map, cfg.edge_fraction, seed)?;
    let schedule = NoiseSchedule::build(cfg.train.t_max, cfg.train.w)?;
    Ok(PipelineContext { region_map, splits, schedule })
}

/// Cloud stage: train the category model on the anonymized category
/// stream.
pub fn global_stage(
    dataset: &CheckInDataset,
    ctx: &PipelineContext,
    cfg: &PipelineConfig,
) -> Result<(GlobalModel<f32>, StageReport), TrainError> {
    let seed = cfg.train.seed;
    let examples = global_examples(&ctx.splits);
    let (train, val) =
        holdout_split(examples, VAL_FRACTION, stage_seed(seed, "global-valsplit", 0));
    let mut init_rng = Rng::new(stage_seed(seed, "global-init", 0));
    let mut model: GlobalModel<f32> =
        GlobalModel::init(dataset.n_categories(), cfg.train.dim, cfg.train.lambda, &mut init_rng);
    let report = train_global(
        &mut model,
        &train,
        &val,
        &ctx.schedule,
        &cfg.train,
        "global",
        stage_seed(seed, "global-train", 0),
    )?;
    Ok((model, report))
}

/// Everything one edge job returns.
pub struct RegionStageResult {
    pub vocab: RegionVocab,
    pub model: RegionModel<f32>,
    pub outcome: RegionOutcome,
    pub audits: Vec<FreezeAudit>,
    pub warnings: Vec<String>,
}

/// Edge stage for one region. In [`TrainMode::Pretrained`] the trained
/// global model is required and stays frozen under audit; in
/// [`TrainMode::Scratch`] it must be absent.
pub fn region_stage(
    dataset: &CheckInDataset,
    ctx: &PipelineContext,
    cfg: &PipelineConfig,
    global: Option<&GlobalModel<f32>>,
    split: &RegionSplit,
) -> Result<RegionStageResult, TrainError> {
    match cfg.mode {
        TrainMode::Pretrained => assert!(global.is_some(), "pretrained mode needs the cloud model"),
        TrainMode::Scratch => assert!(global.is_none(), "scratch mode must not receive a cloud model"),
    }
    let seed = cfg.train.seed;
    let r = split.region;
    let t = &cfg.train;
    let vocab = RegionVocab::build(dataset, &ctx.region_map, r);
    let stage = format!("region-{r}");

    let mut model = match cfg.mode {
        TrainMode::Pretrained => RegionModel::specialize(
            global.unwrap().clone(),
            r,
            vocab.pois.clone(),
            t.gamma,
            t.clip_km,
            t.clip_hours,
        ),
        TrainMode::Scratch => {
            let mut rng = Rng::new(stage_seed(seed, "region-init", r as u64));
            RegionModel::from_scratch(
                dataset.n_categories(),
                t.dim,
                t.lambda,
                t.gamma,
                r,
                vocab.pois.clone(),
                t.clip_km,
                t.clip_hours,
                &mut rng,
            )
        }
    };

    let examples: Vec<TrainingExample> =
        split.edge_sequences.iter().flat_map(|seq| vocab.to_examples(seq)).collect();
    let mut warnings = Vec::new();
    let mut audits = Vec::new();
    let report = if examples.is_empty() {
        let msg = format!("region {r}: no edge sequences; model left at initialization");
        warn!("{msg}");
        warnings.push(msg);
        None
    } else {
        let (train, val) =
            holdout_split(examples, VAL_FRACTION, stage_seed(seed, "region-valsplit", r as u64));
        let base_before = tensor_digest(&model.base.tensors());
        let report = train_region(
            &mut model,
            &train,
            &val,
            &ctx.schedule,
            t,
            cfg.mode == TrainMode::Scratch,
            &stage,
            stage_seed(seed, "region-train", r as u64),
        )?;
        if cfg.mode == TrainMode::Pretrained {
            let base_after = tensor_digest(&model.base.tensors());
            audits.push(FreezeAudit::new(stage.clone(), "base", base_before, base_after));
        }
        Some(report)
    };

    let outcome = RegionOutcome {
        region: r,
        n_pois: vocab.n_pois(),
        n_edge_sequences: split.edge_sequences.len(),
        report,
    };
    Ok(RegionStageResult { vocab, model, outcome, audits, warnings })
}

/// Everything one device job returns.
pub struct DeviceStageResult {
    pub device: DevicePatch,
    pub outcome: DeviceOutcome,
    pub audit: FreezeAudit,
    pub warnings: Vec<String>,
}

/// Device stage for one (user, region) sequence: train a patch on the
/// events before the held-out validation/test pair, against the frozen
/// region model.
pub fn device_stage(
    vocab: &RegionVocab,
    region_model: &RegionModel<f32>,
    seq: &DeviceSequence,
    cfg: &PipelineConfig,
    schedule: &NoiseSchedule,
) -> Result<DeviceStageResult, TrainError> {
    let t = &cfg.train;
    let (rows, ts) = vocab.localize(&seq.checkins);
    let split = device_split(&rows, &ts)
        .expect("device sequences are at least three events by construction");
    let stage = format!("device-u{}-r{}", seq.user, seq.region);
    let job = ((seq.region as u64) << 32) | seq.user as u64;

    let region_before = tensor_digest(&region_model.tensors());
    let mut warnings = Vec::new();
    let (patch, report) = if split.train.is_empty() {
        let msg = format!(
            "user {} in region {}: too few events to train a patch; keeping the region model",
            seq.user, seq.region
        );
        warn!("{msg}");
        warnings.push(msg);
        (None, None)
    } else {
        let mut patch: PatchModel<f32> = PatchModel::near_identity(t.dim, t.patch_init_scale);
        let report = train_device(
            &mut patch,
            region_model,
            &split.train,
            std::slice::from_ref(&split.val),
            schedule,
            t,
            &stage,
            stage_seed(t.seed, "device-train", job),
        )?;
        (Some(patch), Some(report))
    };
    let region_after = tensor_digest(&region_model.tensors());
    let audit = FreezeAudit::new(stage, "region", region_before, region_after);

    Ok(DeviceStageResult {
        device: DevicePatch {
            user: seq.user,
            region: seq.region,
            patch,
            test: split.test,
        },
        outcome: DeviceOutcome {
            user: seq.user,
            region: seq.region,
            n_events: seq.checkins.len(),
            trained: report.is_some(),
            report,
        },
        audit,
        warnings,
    })
}

/// Run the whole pipeline. `resolved_config` is the flat key=value form of
/// the configuration as the caller resolved it; it is embedded verbatim
/// (sorted) in the report and checkpoints.
pub fn run_pipeline(
    dataset: &CheckInDataset,
    cfg: &PipelineConfig,
    resolved_config: Vec<(String, String)>,
) -> Result<PipelineOutcome, TrainError> {
    let total_start = Instant::now();
    let mut stages: Vec<(String, f64)> = Vec::new();
    let mut time = |name: &str, start: Instant| {
        stages.push((name.to_string(), start.elapsed().as_secs_f64()));
    };

    let start = Instant::now();
    let ctx = prepare_context(dataset, cfg)?;
    time("prepare", start);

    let mut warnings = Vec::new();
    let mut audits = Vec::new();

    // Cloud stage.
    let start = Instant::now();
    let (global, global_report) = match cfg.mode {
        TrainMode::Pretrained => {
            let (model, report) = global_stage(dataset, &ctx, cfg)?;
            (Some(model), Some(report))
        }
        TrainMode::Scratch => (None, None),
    };
    time("global", start);

    // Edge stage: one independent job per region.
    let start = Instant::now();
    let region_results: Vec<RegionStageResult> = ctx
        .splits
        .regions
        .par_iter()
        .map(|split| region_stage(dataset, &ctx, cfg, global.as_ref(), split))
        .collect::<Result<_, _>>()?;
    time("regions", start);

    let mut regions: Vec<(RegionVocab, RegionModel<f32>)> = Vec::new();
    let mut region_outcomes = Vec::new();
    for res in region_results {
        warnings.extend(res.warnings);
        audits.extend(res.audits);
        region_outcomes.push(res.outcome);
        regions.push((res.vocab, res.model));
    }
    regions.sort_by_key(|(v, _)| v.region);
    region_outcomes.sort_by_key(|o| o.region);

    // Device stage: one independent job per device sequence.
    let start = Instant::now();
    let by_region: HashMap<u32, usize> =
        regions.iter().enumerate().map(|(i, (v, _))| (v.region, i)).collect();
    let device_jobs: Vec<&DeviceSequence> =
        ctx.splits.regions.iter().flat_map(|rs| rs.device_sequences.iter()).collect();
    let device_results: Vec<DeviceStageResult> = device_jobs
        .par_iter()
        .map(|seq| {
            let (vocab, model) = &regions[by_region[&seq.region]];
            device_stage(vocab, model, seq, cfg, &ctx.schedule)
        })
        .collect::<Result<_, _>>()?;
    time("devices", start);

    let mut devices = Vec::new();
    let mut device_outcomes = Vec::new();
    for res in device_results {
        warnings.extend(res.warnings);
        audits.push(res.audit);
        device_outcomes.push(res.outcome);
        devices.push(res.device);
    }
    devices.sort_by_key(|d| (d.region, d.user));
    device_outcomes.sort_by_key(|o| (o.region, o.user));
    audits.sort_by(|a, b| (&a.stage, &a.tier).cmp(&(&b.stage, &b.tier)));
    warnings.sort();

    let mut config = resolved_config;
    config.sort_by(|a, b| a.0.cmp(&b.0));
    let report = PipelineReport {
        mode: cfg.mode.to_string(),
        seed: cfg.train.seed,
        config,
        n_users: dataset.n_users(),
        n_pois: dataset.n_pois(),
        n_categories: dataset.n_categories(),
        n_checkins: dataset.n_checkins(),
        n_regions: ctx.region_map.k(),
        global: global_report,
        regions: region_outcomes,
        devices: device_outcomes,
        freeze_audits: audits,
        warnings,
    };
    let timing = TimingReport { total_seconds: total_start.elapsed().as_secs_f64(), stages };

    Ok(PipelineOutcome {
        report,
        timing,
        global,
        regions,
        devices,
        splits: ctx.splits,
        region_map: ctx.region_map,
    })
}
