//! Command-line front end over the library: dataset preparation,
//! per-tier training, evaluation, benchmarking, and the end-to-end
//! pipeline, all driven by one merged run configuration.
//!
//! Configuration resolves in three layers — config file, then `DCPR_*`
//! environment variables, then flags — before any stage starts, and the
//! resolved key/value set is echoed into every artifact (reports under
//! `config`, checkpoints as `run.*` entries) so a file always names the
//! run that produced it.
//!
//! Exit codes: 0 success; 2 usage errors and missing inputs; 3 invalid
//! configuration; 4 stage failures (training, evaluation, I/O).
//!
//! The stage subcommands compose: `train-global`, `train-region`, and
//! `train-device` with the same seed write byte-identical checkpoints to
//! a single `pipeline` invocation, because both paths share the
//! library's stage functions and derived per-job seed streams.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    load_checkins, parse_synth_spec, synth_generate, synth_preset, write_checkins, CheckInDataset,
    DataError, SynthConfig, SynthPattern, TierSplits,
};
use crate::denoisers::{GlobalModel, PatchModel, RegionModel, RegionPoi, TrainingExample};
use crate::diffusion::NoiseSchedule;
use crate::evaluation::{
    evaluate_devices, evaluate_global, median_inference_micros, select_candidates, EvalError,
    EvalReport, GlobalEval, TierMetrics,
};
use crate::numerics::{derive_seed, Rng};
use crate::orchestration::{
    device_stage, encode_checkpoint, global_from_checkpoint, global_stage, load_checkpoint,
    patch_from_checkpoint, prepare_context, region_from_checkpoint, region_stage, run_pipeline,
    save_checkpoint, train_device, Checkpoint, CheckpointError, DevicePatch, PipelineConfig,
    RegionVocab, TrainConfig, TrainError, TrainMode,
};

/// CLI failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Missing input files or inconsistent command usage. Exit 2.
    Usage(String),
    /// Unknown config key, unparsable value, or out-of-range setting.
    /// Exit 3.
    Config(String),
    /// A stage failed after configuration resolved. Exit 4.
    Stage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Stage(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Stage(m) => write!(f, "{m}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(m) => CliError::Config(m),
            other => CliError::Stage(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Stage(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::BadParams(m) => CliError::Config(m),
            other => CliError::Stage(other.to_string()),
        }
    }
}

impl From<crate::diffusion::DiffusionError> for CliError {
    fn from(e: crate::diffusion::DiffusionError) -> Self {
        CliError::Stage(e.to_string())
    }
}

/// Fully resolved run settings: training hyperparameters plus dataset
/// partitioning and evaluation knobs. Echoed into every artifact.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// k of the geographic partition.
    pub regions: usize,
    /// Fraction of each region's sequences used for edge training.
    pub edge_fraction: f64,
    pub mode: TrainMode,
    /// Nearest-neighbour candidate count for ranking evaluation.
    pub candidates: usize,
    /// Metric cutoffs.
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            regions: 4,
            edge_fraction: 0.7,
            mode: TrainMode::Pretrained,
            candidates: 200,
            ks: vec![5, 10],
        }
    }
}

/// Every key accepted in config files and as a `DCPR_*` environment
/// variable (uppercased).
pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "candidates",
    "clip_hours",
    "clip_km",
    "dim",
    "dropout",
    "edge_fraction",
    "eta",
    "gamma",
    "ks",
    "lambda",
    "max_epochs",
    "mode",
    "negatives",
    "patch_init_scale",
    "patience",
    "regions",
    "seed",
    "t_max",
    "t_r",
    "w",
];

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| format!("{key}: cannot parse `{value}`: {e}"))
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>, String> {
    let items: Result<Vec<usize>, String> =
        value.split(',').map(|p| parse_as::<usize>(key, p)).collect();
    let items = items?;
    if items.is_empty() || items.contains(&0) {
        return Err(format!("{key}: entries must be positive, got `{value}`"));
    }
    Ok(items)
}

impl RunConfig {
    /// Apply one `key = value` setting. Unknown keys are hard errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "t_max" => self.train.t_max = parse_as(key, value)?,
            "t_r" => self.train.t_r = parse_as(key, value)?,
            "w" => self.train.w = parse_as(key, value)?,
            "dim" => self.train.dim = parse_as(key, value)?,
            "eta" => self.train.eta = parse_as(key, value)?,
            "lambda" => self.train.lambda = parse_as(key, value)?,
            "gamma" => self.train.gamma = parse_as(key, value)?,
            "dropout" => self.train.dropout = parse_as(key, value)?,
            "batch_size" => self.train.batch_size = parse_as(key, value)?,
            "max_epochs" => self.train.max_epochs = parse_as(key, value)?,
            "patience" => self.train.patience = parse_as(key, value)?,
            "negatives" => self.train.negatives = parse_as(key, value)?,
            "patch_init_scale" => self.train.patch_init_scale = parse_as(key, value)?,
            "clip_km" => self.train.clip_km = parse_as(key, value)?,
            "clip_hours" => self.train.clip_hours = parse_as(key, value)?,
            "seed" => self.train.seed = parse_as(key, value)?,
            "regions" => self.regions = parse_as(key, value)?,
            "edge_fraction" => self.edge_fraction = parse_as(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "candidates" => self.candidates = parse_as(key, value)?,
            "ks" => self.ks = parse_usize_list(key, value)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        Ok(())
    }

    /// Range checks beyond parsing; run once after all layers merge.
    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        if self.train.t_r < 1 || self.train.t_r > self.train.t_max {
            return Err(format!(
                "t_r must be in 1..={}, got {}",
                self.train.t_max, self.train.t_r
            ));
        }
        if self.regions == 0 {
            return Err("regions must be at least 1".into());
        }
        if !(self.edge_fraction > 0.0 && self.edge_fraction < 1.0) {
            return Err(format!("edge_fraction must be in (0, 1), got {}", self.edge_fraction));
        }
        if self.candidates == 0 {
            return Err("candidates must be at least 1".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err("ks must be a non-empty list of positive cutoffs".into());
        }
        Ok(())
    }

    /// The full resolved setting list, sorted by key — the provenance
    /// block embedded in reports and checkpoints.
    pub fn resolved_pairs(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let ks = self.ks.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(",");
        let mut pairs: Vec<(String, String)> = vec![
            ("batch_size".into(), t.batch_size.to_string()),
            ("candidates".into(), self.candidates.to_string()),
            ("clip_hours".into(), t.clip_hours.to_string()),
            ("clip_km".into(), t.clip_km.to_string()),
            ("dim".into(), t.dim.to_string()),
            ("dropout".into(), t.dropout.to_string()),
            ("edge_fraction".into(), self.edge_fraction.to_string()),
            ("eta".into(), t.eta.to_string()),
            ("gamma".into(), t.gamma.to_string()),
            ("ks".into(), ks),
            ("lambda".into(), t.lambda.to_string()),
            ("max_epochs".into(), t.max_epochs.to_string()),
            ("mode".into(), self.mode.as_str().to_string()),
            ("negatives".into(), t.negatives.to_string()),
            ("patch_init_scale".into(), t.patch_init_scale.to_string()),
            ("patience".into(), t.patience.to_string()),
            ("regions".into(), self.regions.to_string()),
            ("seed".into(), t.seed.to_string()),
            ("t_max".into(), t.t_max.to_string()),
            ("t_r".into(), t.t_r.to_string()),
            ("w".into(), t.w.to_string()),
        ];
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        pairs
    }
}

/// Parse the flat `key = value` config-file format. `#` starts a
/// comment; blank lines are skipped; unknown keys fail later in
/// [`RunConfig::set`].
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected `key = value`, got `{raw}`", ln + 1));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Collect `DCPR_<KEY>` environment overrides for every known config
/// key, via an injectable lookup so tests stay process-state-free.
pub fn env_overrides(get: impl Fn(&str) -> Option<String>) -> Vec<(String, String)> {
    CONFIG_KEYS
        .iter()
        .filter_map(|key| {
            get(&format!("DCPR_{}", key.to_uppercase())).map(|v| (key.to_string(), v))
        })
        .collect()
}

/// Flags shared by every subcommand. Precedence: config file, then
/// `DCPR_*` environment variables, then these flags.
#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat `key = value` config file; unknown keys are errors.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run seed; every stage derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory artifacts are written to.
    #[arg(long, value_name = "DIR", default_value = "dcpr-out")]
    out: PathBuf,
    /// Training mode: `dcpr` (frozen pretrained base) or `dcpr_t`
    /// (per-region from scratch).
    #[arg(long)]
    mode: Option<String>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, env = "DCPR_JOBS")]
    jobs: Option<usize>,
    /// Reverse-chain length. `bench` accepts a comma list.
    #[arg(long = "t-r", value_name = "N[,N...]")]
    t_r: Option<String>,
    /// Model width. `bench` accepts a comma list.
    #[arg(long, value_name = "N[,N...]")]
    dim: Option<String>,
}

/// The dataset a command runs on: a check-in CSV or a synthetic corpus.
#[derive(Args, Clone, Debug, Default)]
#[group(required = true, multiple = false)]
struct Source {
    /// Check-in CSV (`user_id,poi_id,category_id,lat,lon,timestamp`).
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Synthetic corpus: preset name (`small`, `medium`) or a flat
    /// `key = value` spec file. Generated with the run seed.
    #[arg(long, value_name = "PRESET|FILE")]
    synth: Option<String>,
}

#[derive(Parser, Debug)]
#[command(
    name = "dcpr",
    version,
    about = "Three-tier diffusion next-POI recommender: cloud category model, edge region models, on-device patches"
)]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic check-in corpus and write it as CSV.
    Synth {
        /// Preset name (`small`, `medium`) or a `key = value` spec file.
        #[arg(long, value_name = "PRESET|FILE")]
        synth: String,
        #[command(flatten)]
        common: Common,
    },
    /// Load a corpus and summarize its regions and tier splits.
    PrepareData {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the cloud-tier category model.
    TrainGlobal {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
    },
    /// Specialize one region model at the edge tier.
    TrainRegion {
        #[command(flatten)]
        source: Source,
        /// Region id to train.
        #[arg(long)]
        region: u32,
        /// Cloud checkpoint to specialize from (required in `dcpr`
        /// mode, rejected in `dcpr_t` mode).
        #[arg(long, value_name = "FILE")]
        global_ckpt: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one user's on-device patch against a frozen region model.
    TrainDevice {
        #[command(flatten)]
        source: Source,
        /// Device owner (user id).
        #[arg(long)]
        user: usize,
        /// Region checkpoint the patch sits on.
        #[arg(long, value_name = "FILE")]
        region_ckpt: PathBuf,
        /// Region id; defaults to the checkpoint's.
        #[arg(long)]
        region: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Rank every device's held-out check-in with the trained
    /// checkpoints and report HR@k / NDCG@k per tier and region.
    Evaluate {
        #[command(flatten)]
        source: Source,
        /// Directory holding the checkpoints (default: --out).
        #[arg(long, value_name = "DIR")]
        ckpt_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Measure on-device model size, training epoch time, and median
    /// inference latency across widths and chain lengths.
    Bench {
        /// Timed runs per configuration (after warm-up).
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// Warm-up runs per configuration.
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run all three training tiers end to end and write checkpoints
    /// plus reports.
    Pipeline {
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        common: Common,
    },
}

/// Binary entry point: parse, dispatch, map errors to exit codes.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("warn"),
    )
    .format_timestamp(None)
    .try_init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth { synth, common } => cmd_synth(&synth, &common),
        Cmd::PrepareData { data, common } => cmd_prepare_data(&data, &common),
        Cmd::TrainGlobal { source, common } => cmd_train_global(&source, &common),
        Cmd::TrainRegion { source, region, global_ckpt, common } => {
            cmd_train_region(&source, region, global_ckpt.as_deref(), &common)
        }
        Cmd::TrainDevice { source, user, region_ckpt, region, common } => {
            cmd_train_device(&source, user, &region_ckpt, region, &common)
        }
        Cmd::Evaluate { source, ckpt_dir, common } => {
            cmd_evaluate(&source, ckpt_dir.as_deref(), &common)
        }
        Cmd::Bench { runs, warmup, common } => cmd_bench(runs, warmup, &common),
        Cmd::Pipeline { source, common } => cmd_pipeline(&source, &common),
    }
}

// ---------------------------------------------------------------------
// Configuration resolution
// ---------------------------------------------------------------------

/// Merge defaults <- config file <- environment <- flags. `lists` is
/// true for `bench`, where `--t-r`/`--dim` accept comma lists that are
/// returned separately instead of overriding the scalar settings.
fn resolve_with(
    common: &Common,
    env_get: impl Fn(&str) -> Option<String>,
    lists: bool,
) -> Result<(RunConfig, Vec<usize>, Vec<usize>), CliError> {
    let mut run = RunConfig::default();

    if let Some(path) = &common.config {
        if !path.exists() {
            return Err(CliError::Usage(format!("config file not found: {}", path.display())));
        }
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Stage(format!("reading {}: {e}", path.display())))?;
        let pairs = parse_config_file(&text)
            .map_err(|m| CliError::Config(format!("{}: {m}", path.display())))?;
        for (k, v) in pairs {
            run.set(&k, &v)
                .map_err(|m| CliError::Config(format!("{}: {m}", path.display())))?;
        }
    }

    for (k, v) in env_overrides(&env_get) {
        run.set(&k, &v)
            .map_err(|m| CliError::Config(format!("DCPR_{}: {m}", k.to_uppercase())))?;
    }

    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    if let Some(mode) = &common.mode {
        run.set("mode", mode).map_err(CliError::Config)?;
    }
    let mut t_rs = Vec::new();
    let mut dims = Vec::new();
    if let Some(value) = &common.t_r {
        if lists {
            t_rs = parse_usize_list("t_r", value).map_err(CliError::Config)?;
        } else {
            run.set("t_r", value).map_err(CliError::Config)?;
        }
    }
    if let Some(value) = &common.dim {
        if lists {
            dims = parse_usize_list("dim", value).map_err(CliError::Config)?;
        } else {
            run.set("dim", value).map_err(CliError::Config)?;
        }
    }
    if t_rs.is_empty() {
        t_rs = vec![run.train.t_r];
    }
    if dims.is_empty() {
        dims = vec![run.train.dim];
    }

    run.validate().map_err(CliError::Config)?;
    if lists {
        for &t_r in &t_rs {
            if t_r > run.train.t_max {
                return Err(CliError::Config(format!(
                    "t_r {} exceeds t_max {}",
                    t_r, run.train.t_max
                )));
            }
        }
    }
    Ok((run, t_rs, dims))
}

fn resolve(common: &Common, lists: bool) -> Result<(RunConfig, Vec<usize>, Vec<usize>), CliError> {
    let resolved = resolve_with(common, |k| std::env::var(k).ok(), lists)?;
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        // First (and only) global-pool initialization in the process;
        // thread count never changes outputs, only wall time.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    Ok(resolved)
}

fn pipeline_cfg(run: &RunConfig) -> PipelineConfig {
    PipelineConfig {
        train: run.train.clone(),
        regions: run.regions,
        edge_fraction: run.edge_fraction,
        mode: run.mode,
    }
}

// ---------------------------------------------------------------------
// Artifact plumbing
// ---------------------------------------------------------------------

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Stage(format!("creating {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Stage(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Stage(format!("writing {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Stage(format!("writing {}: {e}", path.display())))
}

/// The resolved config as `run.*` checkpoint entries.
fn ck_pairs(run: &RunConfig) -> Vec<(String, String)> {
    run.resolved_pairs().into_iter().map(|(k, v)| (format!("run.{k}"), v)).collect()
}

fn global_ckpt_path(dir: &Path) -> PathBuf {
    dir.join("global.dcpr")
}

fn region_ckpt_path(dir: &Path, region: u32) -> PathBuf {
    dir.join(format!("region-{region}.dcpr"))
}

fn patch_ckpt_path(dir: &Path, user: usize, region: u32) -> PathBuf {
    dir.join(format!("patch-u{user}-r{region}.dcpr"))
}

fn save_global(dir: &Path, model: &GlobalModel<f32>, run: &RunConfig) -> Result<PathBuf, CliError> {
    let path = global_ckpt_path(dir);
    save_checkpoint(&path, &Checkpoint::for_global(model, ck_pairs(run)))?;
    Ok(path)
}

fn save_region(dir: &Path, model: &RegionModel<f32>, run: &RunConfig) -> Result<PathBuf, CliError> {
    let path = region_ckpt_path(dir, model.region_id);
    save_checkpoint(&path, &Checkpoint::for_region(model, ck_pairs(run)))?;
    Ok(path)
}

fn save_patch(
    dir: &Path,
    patch: &PatchModel<f32>,
    user: usize,
    region: u32,
    run: &RunConfig,
) -> Result<PathBuf, CliError> {
    let path = patch_ckpt_path(dir, user, region);
    let mut pairs = ck_pairs(run);
    pairs.push(("patch.user".into(), user.to_string()));
    pairs.push(("patch.region".into(), region.to_string()));
    save_checkpoint(&path, &Checkpoint::for_patch(patch, pairs))?;
    Ok(path)
}

/// Load the dataset a command was pointed at: CSV path or synthetic
/// spec, generated with the run seed.
fn load_dataset(source: &Source, run: &RunConfig) -> Result<CheckInDataset, CliError> {
    match (&source.data, &source.synth) {
        (Some(path), None) => {
            if !path.exists() {
                return Err(CliError::Usage(format!("data file not found: {}", path.display())));
            }
            Ok(load_checkins(path)?)
        }
        (None, Some(spec)) => Ok(synth_generate(&resolve_synth(spec)?, run.train.seed)?.dataset),
        // clap's argument group guarantees exactly one is present.
        _ => Err(CliError::Usage("exactly one of --data/--synth is required".into())),
    }
}

fn resolve_synth(spec: &str) -> Result<SynthConfig, CliError> {
    if let Some(cfg) = synth_preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "`{spec}` is neither a synthetic preset (small, medium) nor a spec file"
        )));
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Stage(format!("reading {}: {e}", path.display())))?;
    parse_synth_spec(&text).map_err(|e| CliError::Config(e.to_string()))
}

fn synth_pairs(cfg: &SynthConfig) -> Vec<(String, String)> {
    let pattern = match cfg.pattern {
        SynthPattern::Cyclic => "cyclic",
        SynthPattern::Markov => "markov",
    };
    vec![
        ("bias_size".into(), cfg.bias_size.to_string()),
        ("bias_strength".into(), cfg.bias_strength.to_string()),
        ("categories".into(), cfg.categories.to_string()),
        ("checkins_per_user".into(), cfg.checkins_per_user.to_string()),
        ("hop".into(), cfg.hop.to_string()),
        ("noise".into(), cfg.noise.to_string()),
        ("pattern".into(), pattern.to_string()),
        ("pois_per_region".into(), cfg.pois_per_region.to_string()),
        ("regions".into(), cfg.regions.to_string()),
        ("users".into(), cfg.users.to_string()),
    ]
}

// ---------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct SynthSummary {
    config: Vec<(String, String)>,
    synth: Vec<(String, String)>,
    seed: u64,
    csv: String,
    users: usize,
    pois: usize,
    categories: usize,
    checkins: usize,
}

fn cmd_synth(spec: &str, common: &Common) -> Result<(), CliError> {
    let (run, _, _) = resolve(common, false)?;
    let cfg = resolve_synth(spec)?;
    let out = synth_generate(&cfg, run.train.seed)?;
    ensure_dir(&common.out)?;
    let csv = common.out.join("dataset.csv");
    write_checkins(&out.dataset, &csv)?;
    let summary = SynthSummary {
        config: run.resolved_pairs(),
        synth: synth_pairs(&cfg),
        seed: run.train.seed,
        csv: csv.display().to_string(),
        users: out.dataset.n_users(),
        pois: out.dataset.n_pois(),
        categories: out.dataset.n_categories(),
        checkins: out.dataset.n_checkins(),
    };
    write_json(&common.out.join("synth-summary.json"), &summary)?;
    println!(
        "wrote {} ({} users, {} pois, {} categories, {} check-ins)",
        csv.display(),
        summary.users,
        summary.pois,
        summary.categories,
        summary.checkins
    );
    Ok(())
}

#[derive(Serialize)]
struct RegionSummary {
    region: u32,
    pois: usize,
    edge_sequences: usize,
    device_sequences: usize,
}

#[derive(Serialize)]
struct DataSummary {
    config: Vec<(String, String)>,
    seed: u64,
    users: usize,
    pois: usize,
    categories: usize,
    checkins: usize,
    global_sequences: usize,
    regions: Vec<RegionSummary>,
}

fn cmd_prepare_data(data: &Path, common: &Common) -> Result<(), CliError> {
    let (run, _, _) = resolve(common, false)?;
    let source = Source { data: Some(data.to_path_buf()), synth: None };
    let ds = load_dataset(&source, &run)?;
    let ctx = prepare_context(&ds, &pipeline_cfg(&run))?;
    let regions = ctx
        .splits
        .regions
        .iter()
        .map(|r| RegionSummary {
            region: r.region,
            pois: ds
                .pois
                .iter()
                .enumerate()
                .filter(|(i, _)| ctx.region_map.region_of(*i) == r.region)
                .count(),
            edge_sequences: r.edge_sequences.len(),
            device_sequences: r.device_sequences.len(),
        })
        .collect();
    let summary = DataSummary {
        config: run.resolved_pairs(),
        seed: run.train.seed,
        users: ds.n_users(),
        pois: ds.n_pois(),
        categories: ds.n_categories(),
        checkins: ds.n_checkins(),
        global_sequences: ctx.splits.global.len(),
        regions,
    };
    ensure_dir(&common.out)?;
    write_json(&common.out.join("data-summary.json"), &summary)?;
    println!(
        "{} users, {} pois, {} categories, {} check-ins across {} regions",
        summary.users,
        summary.pois,
        summary.categories,
        summary.checkins,
        summary.regions.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct StageArtifact<T: Serialize> {
    config: Vec<(String, String)>,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

fn stage_artifact<T: Serialize>(run: &RunConfig, body: T) -> StageArtifact<T> {
    StageArtifact { config: run.resolved_pairs(), seed: run.train.seed, body }
}

#[derive(Serialize)]
struct GlobalBody {
    checkpoint: String,
    report: crate::orchestration::StageReport,
}

fn cmd_train_global(source: &Source, common: &Common) -> Result<(), CliError> {
    let (run, _, _) = resolve(common, false)?;
    let ds = load_dataset(source, &run)?;
    let ctx = prepare_context(&ds, &pipeline_cfg(&run))?;
    let (model, report) = global_stage(&ds, &ctx, &pipeline_cfg(&run))?;
    ensure_dir(&common.out)?;
    let path = save_global(&common.out, &model, &run)?;
    write_json(
        &common.out.join("global-report.json"),
        &stage_artifact(&run, GlobalBody { checkpoint: path.display().to_string(), report }),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct RegionBody {
    checkpoint: String,
    outcome: crate::orchestration::RegionOutcome,
    audits: Vec<crate::orchestration::FreezeAudit>,
    warnings: Vec<String>,
}

fn cmd_train_region(
    source: &Source,
    region: u32,
    global_ckpt: Option<&Path>,
    common: &Common,
) -> Result<(), CliError> {
    let (run, _, _) = resolve(common, false)?;
    let global = match (run.mode, global_ckpt) {
        (TrainMode::Pretrained, None) => {
            return Err(CliError::Usage(
                "mode `dcpr` specializes a pretrained cloud model: pass --global-ckpt \
                 (or use --mode dcpr_t to train from scratch)"
                    .into(),
            ))
        }
        (TrainMode::Pretrained, Some(path)) => {
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "global checkpoint not found: {}",
                    path.display()
                )));
            }
            Some(global_from_checkpoint(&load_checkpoint(path)?)?)
        }
        (TrainMode::Scratch, Some(_)) => {
            return Err(CliError::Usage(
                "mode `dcpr_t` trains from scratch and takes no --global-ckpt".into(),
            ))
        }
        (TrainMode::Scratch, None) => None,
    };
    let ds = load_dataset(source, &run)?;
    let cfg = pipeline_cfg(&run);
    let ctx = prepare_context(&ds, &cfg)?;
    let split = ctx
        .splits
        .regions
        .iter()
        .find(|s| s.region == region)
        .ok_or_else(|| CliError::Usage(format!("region {region} does not exist in this run")))?;
    let res = region_stage(&ds, &ctx, &cfg, global.as_ref(), split)?;
    ensure_dir(&common.out)?;
    let path = save_region(&common.out, &res.model, &run)?;
    write_json(
        &common.out.join(format!("region-{region}-report.json")),
        &stage_artifact(
            &run,
            RegionBody {
                checkpoint: path.display().to_string(),
                outcome: res.outcome,
                audits: res.audits,
                warnings: res.warnings,
            },
        ),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct DeviceBody {
    checkpoint: Option<String>,
    outcome: crate::orchestration::DeviceOutcome,
    audit: crate::orchestration::FreezeAudit,
    warnings: Vec<String>,
}

fn cmd_train_device(
    source: &Source,
    user: usize,
    region_ckpt: &Path,
    region: Option<u32>,
    common: &Common,
) -> Result<(), CliError> {
    let (run, _, _) = resolve(common, false)?;
    if !region_ckpt.exists() {
        return Err(CliError::Usage(format!(
            "region checkpoint not found: {}",
            region_ckpt.display()
        )));
    }
    let model = region_from_checkpoint(&load_checkpoint(region_ckpt)?)?;
    let region = match region {
        Some(r) if r != model.region_id => {
            return Err(CliError::Usage(format!(
                "--region {r} does not match the checkpoint's region {}",
                model.region_id
            )))
        }
        Some(r) => r,
        None => model.region_id,
    };
    let ds = load_dataset(source, &run)?;
    let cfg = pipeline_cfg(&run);
    let ctx = prepare_context(&ds, &cfg)?;
    let vocab = RegionVocab::build(&ds, &ctx.region_map, region);
    check_vocab_match(&vocab, &model)?;
    let seq = ctx
        .splits
        .regions
        .iter()
        .find(|s| s.region == region)
        .map(|s| s.device_sequences.iter().find(|d| d.user == user))
        .unwrap_or(None)
        .ok_or_else(|| {
            CliError::Usage(format!("user {user} has no device sequence in region {region}"))
        })?;
    let res = device_stage(&vocab, &model, seq, &cfg, &ctx.schedule)?;
    ensure_dir(&common.out)?;
    let checkpoint = match &res.device.patch {
        Some(patch) => {
            let path = save_patch(&common.out, patch, user, region, &run)?;
            println!("wrote {}", path.display());
            Some(path.display().to_string())
        }
        None => {
            println!("sequence too short to train a patch; device keeps the region model");
            None
        }
    };
    write_json(
        &common.out.join(format!("device-u{user}-r{region}-report.json")),
        &stage_artifact(
            &run,
            DeviceBody { checkpoint, outcome: res.outcome, audit: res.audit, warnings: res.warnings },
        ),
    )?;
    Ok(())
}

/// A checkpoint trained under one seed must not silently meet a dataset
/// partitioned under another: the region's POI tables must agree.
fn check_vocab_match(vocab: &RegionVocab, model: &RegionModel<f32>) -> Result<(), CliError> {
    let same = vocab.pois.len() == model.pois.len()
        && vocab
            .pois
            .iter()
            .zip(&model.pois)
            .all(|(a, b)| a.external_id == b.external_id && a.category_row == b.category_row);
    if !same {
        return Err(CliError::Stage(
            "region checkpoint does not match the dataset partition; \
             was it trained with a different seed or region count?"
                .into(),
        ));
    }
    Ok(())
}

/// Next-category evaluation set: each cloud-tier sequence predicts its
/// final event from the preceding ones.
pub fn next_category_examples(splits: &TierSplits) -> Vec<TrainingExample> {
    splits
        .global
        .iter()
        .filter(|seq| seq.len() >= 2)
        .map(|seq| TrainingExample {
            history: seq[..seq.len() - 1].to_vec(),
            target: seq[seq.len() - 1],
            timestamps: None,
        })
        .collect()
}

#[derive(Serialize)]
struct EvalArtifact {
    config: Vec<(String, String)>,
    seed: u64,
    devices: EvalReport,
    global: Option<GlobalEval>,
    warnings: Vec<String>,
}

fn cmd_evaluate(
    source: &Source,
    ckpt_dir: Option<&Path>,
    common: &Common,
) -> Result<(), CliError> {
    let (run, _, _) = resolve(common, false)?;
    let dir = ckpt_dir.unwrap_or(&common.out);
    let ds = load_dataset(source, &run)?;
    let cfg = pipeline_cfg(&run);
    let ctx = prepare_context(&ds, &cfg)?;

    let mut warnings = Vec::new();
    let mut regions: Vec<(RegionVocab, RegionModel<f32>)> = Vec::new();
    let mut devices: Vec<DevicePatch> = Vec::new();
    for split in &ctx.splits.regions {
        let r = split.region;
        let path = region_ckpt_path(dir, r);
        if !path.exists() {
            warnings.push(format!(
                "region {r}: no checkpoint at {}; its devices are skipped",
                path.display()
            ));
            continue;
        }
        let model = region_from_checkpoint(&load_checkpoint(&path)?)?;
        let vocab = RegionVocab::build(&ds, &ctx.region_map, r);
        check_vocab_match(&vocab, &model)?;
        if model.dim() != run.train.dim {
            return Err(CliError::Stage(format!(
                "region {r} checkpoint width {} does not match configured dim {}",
                model.dim(),
                run.train.dim
            )));
        }
        for seq in &split.device_sequences {
            let (rows, ts) = vocab.localize(&seq.checkins);
            let Some(holdout) = crate::orchestration::device_split(&rows, &ts) else {
                continue;
            };
            let patch_path = patch_ckpt_path(dir, seq.user, r);
            let patch = if patch_path.exists() {
                Some(patch_from_checkpoint(&load_checkpoint(&patch_path)?)?)
            } else {
                warnings.push(format!(
                    "user {} region {r}: no patch checkpoint; evaluating with the region model alone",
                    seq.user
                ));
                None
            };
            devices.push(DevicePatch { user: seq.user, region: r, patch, test: holdout.test });
        }
        regions.push((vocab, model));
    }
    if devices.is_empty() {
        return Err(CliError::Usage(format!(
            "no evaluable devices: no region checkpoints in {}",
            dir.display()
        )));
    }

    let report = evaluate_devices(
        &regions,
        &devices,
        &ctx.schedule,
        run.train.t_r,
        &run.ks,
        run.candidates,
        run.train.seed,
    )?;

    let global_path = global_ckpt_path(dir);
    let global = if global_path.exists() {
        let model = global_from_checkpoint(&load_checkpoint(&global_path)?)?;
        let examples = next_category_examples(&ctx.splits);
        if examples.is_empty() {
            warnings.push("no cloud-tier sequences to evaluate".into());
            None
        } else {
            Some(evaluate_global(&model, &examples, &ctx.schedule, run.train.t_r, run.train.seed)?)
        }
    } else {
        None
    };

    warnings.sort();
    let artifact = EvalArtifact {
        config: run.resolved_pairs(),
        seed: run.train.seed,
        devices: report,
        global,
        warnings,
    };
    ensure_dir(&common.out)?;
    write_json(&common.out.join("eval.json"), &artifact)?;
    let text = eval_text(&artifact);
    write_text(&common.out.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn metric_row(label: &str, ks: &[usize], m: &TierMetrics) -> String {
    use std::fmt::Write;
    let mut s = format!("  {label:<12}");
    for (i, _) in ks.iter().enumerate() {
        let _ = write!(s, "  {:>8.4}  {:>8.4}", m.hr[i].1, m.ndcg[i].1);
    }
    let _ = write!(s, "  {:>9.2}", m.mean_rank);
    s.push('\n');
    s
}

fn eval_text(a: &EvalArtifact) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let r = &a.devices;
    let _ = writeln!(
        s,
        "ranking evaluation: {} devices ({} patched), {} nearest candidates, seed {}",
        r.n_devices, r.n_patched, r.candidates, a.seed
    );
    let mut header = format!("  {:<12}", "tier");
    for k in &r.ks {
        let _ = write!(header, "  {:>8}  {:>8}", format!("HR@{k}"), format!("NDCG@{k}"));
    }
    let _ = write!(header, "  {:>9}", "mean rank");
    let _ = writeln!(s, "{header}");
    s.push_str(&metric_row("device", &r.ks, &r.device));
    s.push_str(&metric_row("region-only", &r.ks, &r.region_only));
    for pr in &r.per_region {
        let _ = writeln!(s, "region {} ({} devices):", pr.region, pr.n_devices);
        s.push_str(&metric_row("device", &r.ks, &pr.device));
        s.push_str(&metric_row("region-only", &r.ks, &pr.region_only));
    }
    if let Some(g) = &a.global {
        let _ = writeln!(
            s,
            "cloud tier: next-category accuracy {:.4} over {} sequences",
            g.accuracy, g.n_examples
        );
    }
    for w in &a.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

#[derive(Serialize)]
struct BenchPoint {
    t_r: usize,
    median_latency_ms: f64,
    denoiser_calls: usize,
}

#[derive(Serialize)]
struct BenchDim {
    dim: usize,
    /// Serialized region checkpoint + patch checkpoint, megabytes.
    device_size_mb: f64,
    /// Median wall-clock time of one patch-training epoch.
    train_epoch_ms: f64,
    points: Vec<BenchPoint>,
}

#[derive(Serialize)]
struct BenchArtifact {
    config: Vec<(String, String)>,
    seed: u64,
    os: String,
    arch: String,
    threads: usize,
    runs: usize,
    warmup: usize,
    dims: Vec<BenchDim>,
}

/// Synthetic fixture for benchmarking: a POI grid, a from-scratch
/// region model, a near-identity patch, and a short history.
fn bench_fixture(
    dim: usize,
    run: &RunConfig,
) -> Result<(RegionVocab, RegionModel<f32>, PatchModel<f32>, TrainingExample, Vec<usize>), CliError>
{
    const POIS: usize = 64;
    const CATS: usize = 8;
    let pois: Vec<RegionPoi> = (0..POIS)
        .map(|i| RegionPoi {
            external_id: i as u32,
            category_row: i % CATS,
            lat: 0.01 * (i / CATS) as f64,
            lon: 0.01 * (i % CATS) as f64,
        })
        .collect();
    let mut rng = Rng::new(derive_seed(run.train.seed, "bench-init", dim as u64));
    let t = &run.train;
    let model = RegionModel::from_scratch(
        CATS, dim, t.lambda, t.gamma, 0, pois.clone(), t.clip_km, t.clip_hours, &mut rng,
    );
    let patch = PatchModel::near_identity(dim, t.patch_init_scale);
    let vocab = RegionVocab::from_pois(0, pois);
    let example = TrainingExample {
        history: vec![0, 1, 2, 3],
        target: 4,
        timestamps: Some(vec![0, 3_600, 7_200, 10_800]),
    };
    let candidates = select_candidates(&vocab, &example.history, example.target, run.candidates)?;
    Ok((vocab, model, patch, example, candidates))
}

fn cmd_bench(runs: usize, warmup: usize, common: &Common) -> Result<(), CliError> {
    let (run, t_rs, dims) = resolve(common, true)?;
    if runs == 0 {
        return Err(CliError::Config("runs must be at least 1".into()));
    }
    let schedule = NoiseSchedule::build(run.train.t_max, run.train.w)?;
    let mut out_dims = Vec::new();
    for &dim in &dims {
        let (vocab, model, patch, example, candidates) = bench_fixture(dim, &run)?;
        let size_bytes = encode_checkpoint(&Checkpoint::for_region(&model, Vec::new())).len()
            + encode_checkpoint(&Checkpoint::for_patch(&patch, Vec::new())).len();

        // A few epochs of patch training, timed per epoch.
        let train: Vec<TrainingExample> = (0..6)
            .map(|i| TrainingExample {
                history: vec![i, i + 1, i + 2],
                target: i + 3,
                timestamps: Some(vec![0, 3_600, 7_200]),
            })
            .collect();
        let val = vec![TrainingExample {
            history: vec![8, 9, 10],
            target: 11,
            timestamps: Some(vec![0, 3_600, 7_200]),
        }];
        let mut cfg = run.train.clone();
        cfg.max_epochs = 3;
        cfg.patience = 3;
        let mut timed_patch = patch.clone();
        let start = Instant::now();
        let report = train_device(
            &mut timed_patch,
            &model,
            &train,
            &val,
            &schedule,
            &cfg,
            "bench",
            run.train.seed,
        )?;
        let train_epoch_ms =
            start.elapsed().as_secs_f64() * 1e3 / report.epochs_run.max(1) as f64;

        let mut points = Vec::new();
        for &t_r in &t_rs {
            let (us, calls) = median_inference_micros(
                &model,
                Some(&patch),
                &vocab,
                &example,
                &schedule,
                t_r,
                &candidates,
                warmup,
                runs,
                run.train.seed,
            )?;
            points.push(BenchPoint {
                t_r,
                median_latency_ms: us / 1e3,
                denoiser_calls: calls,
            });
        }
        out_dims.push(BenchDim {
            dim,
            device_size_mb: size_bytes as f64 / 1e6,
            train_epoch_ms,
            points,
        });
    }

    let artifact = BenchArtifact {
        config: run.resolved_pairs(),
        seed: run.train.seed,
        os: std::env::consts::OS.to_string(),
        arch: std::env::consts::ARCH.to_string(),
        threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
        runs,
        warmup,
        dims: out_dims,
    };
    ensure_dir(&common.out)?;
    write_json(&common.out.join("bench.json"), &artifact)?;
    let text = bench_text(&artifact);
    write_text(&common.out.join("bench.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn bench_text(a: &BenchArtifact) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "inference benchmark on {}/{} ({} threads), median of {} runs after {} warm-ups",
        a.os, a.arch, a.threads, a.runs, a.warmup
    );
    let _ = writeln!(
        s,
        "  {:>5}  {:>6}  {:>14}  {:>16}  {:>16}  {:>15}",
        "dim", "t_r", "latency (ms)", "denoiser calls", "device size (MB)", "epoch time (ms)"
    );
    for d in &a.dims {
        for p in &d.points {
            let _ = writeln!(
                s,
                "  {:>5}  {:>6}  {:>14.3}  {:>16}  {:>16.3}  {:>15.1}",
                d.dim, p.t_r, p.median_latency_ms, p.denoiser_calls, d.device_size_mb, d.train_epoch_ms
            );
        }
    }
    s
}

fn cmd_pipeline(source: &Source, common: &Common) -> Result<(), CliError> {
    let (run, _, _) = resolve(common, false)?;
    let ds = load_dataset(source, &run)?;
    let outcome = run_pipeline(&ds, &pipeline_cfg(&run), run.resolved_pairs())?;
    ensure_dir(&common.out)?;
    if let Some(global) = &outcome.global {
        save_global(&common.out, global, &run)?;
    }
    for (_, model) in &outcome.regions {
        save_region(&common.out, model, &run)?;
    }
    for device in &outcome.devices {
        if let Some(patch) = &device.patch {
            save_patch(&common.out, patch, device.user, device.region, &run)?;
        }
    }
    write_json(&common.out.join("report.json"), &outcome.report)?;
    write_text(&common.out.join("report.txt"), &outcome.report.to_text())?;
    write_json(&common.out.join("timing.json"), &outcome.timing)?;
    print!("{}", outcome.report.to_text());
    println!("artifacts in {}", common.out.display());
    Ok(())
}

// Re-exported for integration tests that drive stages the way the
// binary does.
pub use self::internal::resolve_run_config_for_tests;
mod internal {
    use super::*;

    /// Test hook: resolve a RunConfig exactly as the binary would, from
    /// explicit file pairs, an env lookup, and flag-style overrides.
    pub fn resolve_run_config_for_tests(
        file_pairs: &[(&str, &str)],
        env_get: impl Fn(&str) -> Option<String>,
        flag_seed: Option<u64>,
    ) -> Result<RunConfig, String> {
        let mut run = RunConfig::default();
        for (k, v) in file_pairs {
            run.set(k, v)?;
        }
        for (k, v) in env_overrides(env_get) {
            run.set(&k, &v)?;
        }
        if let Some(seed) = flag_seed {
            run.train.seed = seed;
        }
        run.validate()?;
        Ok(run)
    }
}
