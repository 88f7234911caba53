//! Seeded experiment runs and one-axis sweeps.
//!
//! A run generates one scenario per seed, trains the branches on separately
//! seeded training scenarios, tracks, evaluates and writes CSVs. Branches are
//! shared across evaluation seeds unless `training.per_seed` is set.
//! Everything except `runtime.csv` is a pure function of the spec.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::association::{
    AppearanceMode, CostMode, FeatureSource, FrameOutput, MotionMode, TokenEncoder, Tracker, TrackerConfig,
};
use crate::branches::{loss_det, train, BranchConfig, BranchParams, TokenSet, TrainConfig, TrainingWindow};
use crate::error::{Result, TrackError};
use crate::geometry::{
    aggregate_max, aggregate_mean, project_ground_to_pixel, render_smoothed_targets, render_weighted_targets,
    extract_peaks, BevGrid, BevPoint, FeatureGrid,
};
use crate::io::{format_value, write_cost_dump, write_metric_rows, write_tracks, MetricRow};
use crate::kalman::KalmanConfig;
use crate::metrics::{aggregate, evaluate_detection, evaluate_tracking, EvalConfig, MetricReport};
use crate::simulator::{generate_scenario, normalize, DetectionFrame, GroundTruth, ScenarioConfig};

/// Gaussian kernel radius (cells) for occupancy maps.
pub const KERNEL_RADIUS_CELLS: usize = 8;

const TRAIN_SCENARIO_SALT: u64 = 0x7a3c_91d5_e2b4_0f68;
const INIT_SALT: u64 = 0x1f2e_3d4c_5b6a_7988;
const POOL_SALT: u64 = 0x51b0_c3a7_66d2_e91f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Detection features used as generated.
    #[default]
    None,
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerSpec {
    pub k: usize,
    pub alpha: f64,
    pub gate: f64,
    pub tmc_gate_per_lag: f64,
    pub detection_threshold: f64,
    /// Defaults to `k`.
    pub max_age: Option<usize>,
    pub motion_mode: MotionMode,
    pub appearance_mode: AppearanceMode,
    pub cost_mode: CostMode,
    pub feature_source: FeatureSource,
    pub ema_momentum: f64,
    /// Meters per unit in the token location channels.
    pub location_scale: f64,
}

impl Default for TrackerSpec {
    fn default() -> Self {
        let t = TrackerConfig::default();
        Self {
            k: t.max_lag,
            alpha: t.alpha,
            gate: t.gate,
            tmc_gate_per_lag: t.tmc_gate_per_lag,
            detection_threshold: t.detection_threshold,
            max_age: None,
            motion_mode: t.motion_mode,
            appearance_mode: t.appearance_mode,
            cost_mode: t.cost_mode,
            feature_source: t.feature_source,
            ema_momentum: t.ema_momentum,
            location_scale: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchSpec {
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl Default for BranchSpec {
    fn default() -> Self {
        let b = BranchConfig::default();
        Self {
            heads: b.heads,
            blocks: b.blocks,
            ffn_dim: b.ffn_dim,
            dropout: b.dropout,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    pub steps: usize,
    pub learning_rate: f64,
    pub final_lr_ratio: f64,
    pub grad_accumulation: usize,
    pub seed: u64,
    /// Length of each training scenario.
    pub frames: usize,
    /// Independently seeded training scenarios; each brings fresh identities.
    pub scenarios: usize,
    /// Identity added to the initial query and key projections.
    pub query_key_init: f64,
    /// Train separate branches for every evaluation seed instead of one
    /// set per configuration.
    pub per_seed: bool,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: 3000,
            learning_rate: t.learning_rate,
            final_lr_ratio: t.final_lr_ratio,
            grad_accumulation: t.grad_accumulation,
            seed: 0,
            frames: 100,
            scenarios: 40,
            query_key_init: 2.0,
            per_seed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub pooling: Pooling,
    pub dump_costs: bool,
    pub write_tracks: bool,
    pub tracker: TrackerSpec,
    pub branches: BranchSpec,
    pub training: TrainingSpec,
    pub eval: EvalConfig,
    pub scenario: ScenarioConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "baseline".into(),
            seeds: vec![0],
            output_dir: PathBuf::from("results"),
            pooling: Pooling::None,
            dump_costs: false,
            write_tracks: true,
            tracker: TrackerSpec::default(),
            branches: BranchSpec::default(),
            training: TrainingSpec::default(),
            eval: EvalConfig::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

fn hex_digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn to_toml<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| TrackError::Parse(e.to_string()))
}

/// Inputs that determine the trained branches for one seed.
#[derive(Serialize)]
struct ModelKey<'a> {
    k: usize,
    detection_threshold: f64,
    location_scale: f64,
    pooling: Pooling,
    branches: &'a BranchSpec,
    training: &'a TrainingSpec,
    scenario: &'a ScenarioConfig,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: Self = toml::from_str(&text).map_err(|e| TrackError::Parse(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        to_toml(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(TrackError::InvalidConfig("seeds must not be empty".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(TrackError::InvalidConfig(format!("invalid run name {:?}", self.name)));
        }
        self.scenario.validate()?;
        self.eval.validate()?;
        self.tracker_config()?.validate()?;
        if self.tracker.location_scale <= 0.0 || !self.tracker.location_scale.is_finite() {
            return Err(TrackError::InvalidConfig("location_scale must be positive".into()));
        }
        if self.training.frames == 0 || self.training.scenarios == 0 {
            return Err(TrackError::InvalidConfig("training.frames and training.scenarios must be positive".into()));
        }
        self.branch_config().validate()
    }

    /// Hash of everything except the run name, seeds and output location.
    pub fn config_hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.name.clear();
        canonical.seeds.clear();
        canonical.output_dir = PathBuf::new();
        canonical.dump_costs = false;
        canonical.write_tracks = false;
        Ok(hex_digest(&to_toml(&canonical)?))
    }

    fn model_key(&self) -> Result<String> {
        to_toml(&ModelKey {
            k: self.tracker.k,
            detection_threshold: self.tracker.detection_threshold,
            location_scale: self.tracker.location_scale,
            pooling: self.pooling,
            branches: &self.branches,
            training: &self.training,
            scenario: &self.scenario,
        })
        .map(|s| hex_digest(&s))
    }

    pub fn branch_config(&self) -> BranchConfig {
        BranchConfig {
            dim: self.scenario.embed_dim + TokenEncoder::LOCATION_CHANNELS,
            heads: self.branches.heads,
            blocks: self.branches.blocks,
            ffn_dim: self.branches.ffn_dim,
            max_lag: self.tracker.k,
            dropout: self.branches.dropout,
        }
    }

    pub fn encoder(&self) -> TokenEncoder {
        let dim = self.scenario.embed_dim + TokenEncoder::LOCATION_CHANNELS;
        TokenEncoder {
            location_scale: self.tracker.location_scale,
            ..TokenEncoder::new(dim, &self.scenario.grid)
        }
    }

    pub fn tracker_config(&self) -> Result<TrackerConfig> {
        let t = &self.tracker;
        let cfg = TrackerConfig {
            max_lag: t.k,
            alpha: t.alpha,
            gate: t.gate,
            tmc_gate_per_lag: t.tmc_gate_per_lag,
            detection_threshold: t.detection_threshold,
            max_age: t.max_age.unwrap_or(t.k),
            cost_mode: t.cost_mode,
            motion_mode: t.motion_mode,
            appearance_mode: t.appearance_mode,
            feature_source: t.feature_source,
            ema_momentum: t.ema_momentum,
            kalman: KalmanConfig::for_scenario(self.scenario.frame_rate, self.scenario.loc_noise),
            encoder: Some(self.encoder()),
            record_costs: true,
            ..TrackerConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario_for(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            ..self.scenario.clone()
        }
    }

    /// The `index`-th training scenario for evaluation seed `seed`.
    pub fn training_scenario_for(&self, seed: u64, index: usize) -> ScenarioConfig {
        ScenarioConfig {
            seed: derive_seed(seed ^ self.training.seed, TRAIN_SCENARIO_SALT.wrapping_add(index as u64)),
            num_frames: self.training.frames,
            ..self.scenario.clone()
        }
    }
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = seed.wrapping_add(salt).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Replaces every detection feature with an aggregate of noisy per-camera
/// views; cameras that cannot see the detection contribute zeros.
pub fn pool_features(cfg: &ScenarioConfig, frames: &mut [DetectionFrame], pooling: Pooling) -> Result<()> {
    if pooling == Pooling::None || cfg.cameras.is_empty() {
        return Ok(());
    }
    let dim = cfg.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, POOL_SALT));
    let noise = Normal::new(0.0, cfg.embed_noise / (dim as f64).sqrt())
        .map_err(|e| TrackError::InvalidConfig(e.to_string()))?;
    for frame in frames {
        let n = frame.detections.len();
        if n == 0 {
            continue;
        }
        // One cell per detection.
        let grid = BevGrid::new(n, 1, 1.0)?;
        let mut views = Vec::with_capacity(cfg.cameras.len());
        let mut seen = vec![false; n];
        for cam in &cfg.cameras {
            let mut g = FeatureGrid::zeros(grid, dim);
            for (i, d) in frame.detections.iter().enumerate() {
                let jitter: Vec<f64> = (0..dim).map(|_| noise.sample(&mut rng)).collect();
                if project_ground_to_pixel(cam, d.location).is_some() {
                    seen[i] = true;
                    for (e, (f, j)) in d.feature.iter().zip(jitter).enumerate() {
                        g.set(e, i, 0, f + j);
                    }
                }
            }
            views.push(g);
        }
        let pooled = match pooling {
            Pooling::Max => aggregate_max(&views)?,
            Pooling::Mean => aggregate_mean(&views)?,
            Pooling::None => unreachable!(),
        };
        for (i, d) in frame.detections.iter_mut().enumerate() {
            if seen[i] {
                let mut f = pooled.cell(i, 0);
                normalize(&mut f);
                d.feature = f;
            }
        }
    }
    Ok(())
}

/// Scenario for `seed` with the spec's pooling applied.
pub fn prepare_scenario(spec: &ExperimentSpec, cfg: &ScenarioConfig) -> Result<(GroundTruth, Vec<DetectionFrame>)> {
    let (gt, mut frames) = generate_scenario(cfg)?;
    pool_features(cfg, &mut frames, spec.pooling)?;
    Ok((gt, frames))
}

fn detection_map_points(grid: &BevGrid, frame: &DetectionFrame) -> Vec<(BevPoint, f64)> {
    frame
        .detections
        .iter()
        .map(|d| (grid.clamp(d.location), d.confidence))
        .collect()
}

/// Non-overlapping windows of `K + 1` frames built from ground-truth
/// associated detections; clutter is left out.
pub fn training_windows(
    spec: &ExperimentSpec,
    gt: &GroundTruth,
    frames: &[DetectionFrame],
) -> Result<Vec<TrainingWindow>> {
    let k = spec.tracker.k;
    let grid = spec.scenario.grid;
    let encoder = spec.encoder();
    let width = encoder.width(spec.scenario.embed_dim);
    let mut out = Vec::new();
    let mut buf = vec![0.0; width];
    for w in 0..frames.len() / (k + 1) {
        let t = w * (k + 1) + k;
        let mut features = Vec::new();
        let mut peds = Vec::new();
        let mut lags = Vec::new();
        let mut offsets = Vec::new();
        let mut predicted_maps = Vec::with_capacity(k + 1);
        let mut target_maps = Vec::with_capacity(k + 1);
        for lag in 0..=k {
            let frame = &frames[t - lag];
            for d in &frame.detections {
                let Some(id) = d.truth_id else { continue };
                if d.confidence <= spec.tracker.detection_threshold {
                    continue;
                }
                encoder.encode_into(d.location, &d.feature, &mut buf);
                features.extend_from_slice(&buf);
                peds.push(Some(id));
                lags.push(lag);
                let offset = match (lag, gt.location(t, id), gt.location(t - lag, id)) {
                    (1.., Some(now), Some(then)) => Some([now.x - then.x, now.y - then.y]),
                    _ => None,
                };
                offsets.push(offset);
            }
            predicted_maps.push(render_weighted_targets(
                grid,
                &detection_map_points(&grid, frame),
                KERNEL_RADIUS_CELLS,
            )?);
            let truth: Vec<BevPoint> = gt.frames[t - lag].iter().map(|(_, p)| *p).collect();
            target_maps.push(render_smoothed_targets(grid, &truth, KERNEL_RADIUS_CELLS)?);
        }
        let rows = lags.len();
        let tokens = TokenSet::new(
            nalgebra::DMatrix::from_row_slice(rows, width, &features),
            peds,
            lags,
            k,
        )?;
        let l_det = loss_det(&predicted_maps, &target_maps)?;
        out.push(TrainingWindow::new(tokens, offsets, l_det)?);
    }
    if out.is_empty() {
        return Err(TrackError::InvalidConfig(format!(
            "training scenario of {} frames is shorter than one window of {}",
            frames.len(),
            k + 1
        )));
    }
    Ok(out)
}

pub fn train_branches(spec: &ExperimentSpec, seed: u64) -> Result<BranchParams> {
    let mut windows = Vec::new();
    for i in 0..spec.training.scenarios {
        let (gt, frames) = prepare_scenario(spec, &spec.training_scenario_for(seed, i))?;
        windows.extend(training_windows(spec, &gt, &frames)?);
    }
    let cfg = spec.training_scenario_for(seed, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_SALT));
    let mut init = BranchParams::init(spec.branch_config(), &mut rng)?;
    init.bias_query_key(spec.training.query_key_init);
    let t = &spec.training;
    let train_cfg = TrainConfig {
        steps: t.steps,
        learning_rate: t.learning_rate,
        final_lr_ratio: t.final_lr_ratio,
        grad_accumulation: t.grad_accumulation,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    Ok(train(&init, &windows, &train_cfg)?.params)
}

/// Trained branches shared across runs whose training inputs agree.
#[derive(Debug, Default)]
pub struct ModelCache {
    models: HashMap<(u64, String), BranchParams>,
}

impl ModelCache {
    /// Branches for evaluation seed `seed`; shared by all seeds unless
    /// `training.per_seed` is set.
    pub fn get_or_train(&mut self, spec: &ExperimentSpec, seed: u64) -> Result<&BranchParams> {
        let seed = if spec.training.per_seed { seed } else { 0 };
        let key = (seed, spec.model_key()?);
        if !self.models.contains_key(&key) {
            let params = train_branches(spec, seed)?;
            self.models.insert(key.clone(), params);
        }
        Ok(&self.models[&key])
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

/// Observed extremes of the cost matrices of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRange {
    pub tmc_min: f64,
    pub tmc_max: f64,
    pub tac_min: f64,
    pub tac_max: f64,
}

impl Default for CostRange {
    fn default() -> Self {
        Self {
            tmc_min: f64::INFINITY,
            tmc_max: f64::NEG_INFINITY,
            tac_min: f64::INFINITY,
            tac_max: f64::NEG_INFINITY,
        }
    }
}

impl CostRange {
    fn absorb(&mut self, outputs: &[FrameOutput]) {
        for c in outputs.iter().filter_map(|o| o.costs.as_ref()) {
            for v in c.tmc.iter() {
                self.tmc_min = self.tmc_min.min(*v);
                self.tmc_max = self.tmc_max.max(*v);
            }
            for v in c.tac.iter() {
                self.tac_min = self.tac_min.min(*v);
                self.tac_max = self.tac_max.max(*v);
            }
        }
    }

    pub fn merge(&mut self, other: &CostRange) {
        self.tmc_min = self.tmc_min.min(other.tmc_min);
        self.tmc_max = self.tmc_max.max(other.tmc_max);
        self.tac_min = self.tac_min.min(other.tac_min);
        self.tac_max = self.tac_max.max(other.tac_max);
    }
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: MetricReport,
    pub outputs: Vec<FrameOutput>,
    pub seconds: f64,
}

/// Tracks and evaluates one seed.
pub fn run_seed(spec: &ExperimentSpec, seed: u64, params: Option<&BranchParams>) -> Result<SeedOutcome> {
    let cfg = spec.scenario_for(seed);
    let (gt, frames) = prepare_scenario(spec, &cfg)?;
    let tracker_cfg = spec.tracker_config()?;
    let params = if tracker_cfg.needs_branches() { params.cloned() } else { None };
    let mut tracker = Tracker::new(tracker_cfg, params)?;
    let start = Instant::now();
    let outputs = tracker.run(&frames)?;
    let seconds = start.elapsed().as_secs_f64();
    let report = evaluate(spec, &gt, &frames, &outputs)?;
    Ok(SeedOutcome {
        seed,
        report,
        outputs,
        seconds,
    })
}

/// Occupancy peaks per frame: detections rendered as weighted Gaussians and
/// reduced by 3×3 non-maximum suppression at the detection threshold.
pub fn detection_peaks(spec: &ExperimentSpec, frames: &[DetectionFrame]) -> Result<Vec<Vec<BevPoint>>> {
    let grid = spec.scenario.grid;
    frames
        .iter()
        .map(|f| {
            let map = render_weighted_targets(grid, &detection_map_points(&grid, f), KERNEL_RADIUS_CELLS)?;
            Ok(extract_peaks(&map, spec.tracker.detection_threshold)
                .into_iter()
                .map(|(p, _)| p)
                .collect())
        })
        .collect()
}

/// Tracking metrics of `outputs` plus detection metrics of the occupancy
/// peaks of `frames`.
pub fn evaluate(
    spec: &ExperimentSpec,
    gt: &GroundTruth,
    frames: &[DetectionFrame],
    outputs: &[FrameOutput],
) -> Result<MetricReport> {
    let hyp: Vec<Vec<(usize, BevPoint)>> = outputs
        .iter()
        .map(|o| o.tracks.iter().map(|r| (r.id, r.location)).collect())
        .collect();
    let tracking = evaluate_tracking(&gt.frames, &hyp, &spec.eval)?;
    let peaks = detection_peaks(spec, frames)?;
    let truth: Vec<Vec<BevPoint>> = gt.frames.iter().map(|f| f.iter().map(|(_, p)| *p).collect()).collect();
    let detection = evaluate_detection(&truth, &peaks, &spec.eval)?;
    Ok(MetricReport { tracking, detection })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub name: String,
    pub config_hash: String,
    pub per_seed: Vec<(u64, MetricReport)>,
    pub mean: [f64; 17],
    pub std: [f64; 17],
    pub cost_range: CostRange,
    pub dir: PathBuf,
}

impl ExperimentResult {
    pub fn metric(&self, name: &str) -> Option<(f64, f64)> {
        let i = MetricReport::FIELDS.iter().position(|f| *f == name)?;
        Some((self.mean[i], self.std[i]))
    }

    pub fn values(&self, name: &str) -> Vec<f64> {
        let Some(i) = MetricReport::FIELDS.iter().position(|f| *f == name) else {
            return Vec::new();
        };
        self.per_seed.iter().map(|(_, r)| r.values()[i]).collect()
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    run_experiment_with_cache(spec, &mut ModelCache::default())
}

/// Runs every seed, writing `per_seed.csv`, `summary.csv`, `spec.toml`,
/// per-seed track files and `runtime.csv` under `output_dir/name`.
pub fn run_experiment_with_cache(spec: &ExperimentSpec, cache: &mut ModelCache) -> Result<ExperimentResult> {
    spec.validate()?;
    let hash = spec.config_hash()?;
    let dir = spec.output_dir.join(&spec.name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("spec.toml"), spec.to_toml()?)?;
    let needs_branches = spec.tracker_config()?.needs_branches();
    let mut per_seed = Vec::with_capacity(spec.seeds.len());
    let mut rows = Vec::with_capacity(spec.seeds.len());
    let mut runtime = String::from("seed,frames,seconds,fps\n");
    let mut cost_range = CostRange::default();
    for &seed in &spec.seeds {
        let params = if needs_branches {
            Some(cache.get_or_train(spec, seed)?)
        } else {
            None
        };
        let outcome = run_seed(spec, seed, params)?;
        cost_range.absorb(&outcome.outputs);
        if spec.write_tracks {
            fs::create_dir_all(dir.join("tracks"))?;
            write_tracks(&dir.join("tracks").join(format!("seed_{seed}.csv")), &outcome.outputs)?;
        }
        if spec.dump_costs {
            fs::create_dir_all(dir.join("costs"))?;
            write_cost_dump(&dir.join("costs").join(format!("seed_{seed}.csv")), &outcome.outputs)?;
        }
        let n = outcome.outputs.len();
        runtime.push_str(&format!(
            "{seed},{n},{},{}\n",
            format_value(outcome.seconds),
            format_value(n as f64 / outcome.seconds.max(1e-9))
        ));
        rows.push(MetricRow::new(&spec.name, seed, &hash, &outcome.report));
        // Flush after every seed so an abort keeps finished results.
        write_metric_rows(&dir.join("per_seed.csv"), &rows)?;
        per_seed.push((seed, outcome.report));
    }
    fs::write(dir.join("runtime.csv"), runtime)?;
    let reports: Vec<MetricReport> = per_seed.iter().map(|(_, r)| *r).collect();
    let (mean, std) = aggregate(&reports);
    let summary = [("mean", mean), ("std", std)].map(|(label, values)| MetricRow {
        run_id: spec.name.clone(),
        seed: label.to_string(),
        config_hash: hash.clone(),
        values: values.to_vec(),
    });
    write_metric_rows(&dir.join("summary.csv"), &summary)?;
    Ok(ExperimentResult {
        name: spec.name.clone(),
        config_hash: hash,
        per_seed,
        mean,
        std,
        cost_range,
        dir,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    Alpha,
    CostMode,
    MotionMode,
    AppearanceMode,
    Pooling,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::K,
        SweepAxis::Alpha,
        SweepAxis::CostMode,
        SweepAxis::MotionMode,
        SweepAxis::AppearanceMode,
        SweepAxis::Pooling,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Alpha => "alpha",
            SweepAxis::CostMode => "cost_mode",
            SweepAxis::MotionMode => "motion_mode",
            SweepAxis::AppearanceMode => "appearance_mode",
            SweepAxis::Pooling => "pooling",
        }
    }

    /// Sets this axis of `spec` to `value`.
    pub fn apply(&self, spec: &mut ExperimentSpec, value: &str) -> Result<()> {
        let bad = || TrackError::InvalidConfig(format!("invalid {} value {value:?}", self.name()));
        let variant = |v: &str| -> Result<toml::Value> { Ok(toml::Value::String(v.to_string())) };
        match self {
            SweepAxis::K => {
                spec.tracker.k = value.parse().map_err(|_| bad())?;
                spec.tracker.max_age = None;
            }
            SweepAxis::Alpha => spec.tracker.alpha = value.parse().map_err(|_| bad())?,
            SweepAxis::CostMode => spec.tracker.cost_mode = variant(value)?.try_into().map_err(|_| bad())?,
            SweepAxis::MotionMode => spec.tracker.motion_mode = variant(value)?.try_into().map_err(|_| bad())?,
            SweepAxis::AppearanceMode => {
                spec.tracker.appearance_mode = variant(value)?.try_into().map_err(|_| bad())?
            }
            SweepAxis::Pooling => spec.pooling = variant(value)?.try_into().map_err(|_| bad())?,
        }
        spec.validate()
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = TrackError;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| TrackError::InvalidConfig(format!("unknown sweep axis {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<(String, ExperimentResult)>,
    pub table: PathBuf,
    pub plot: PathBuf,
}

impl SweepResult {
    pub fn get(&self, value: &str) -> Option<&ExperimentResult> {
        self.points.iter().find(|(v, _)| v == value).map(|(_, r)| r)
    }
}

pub fn sweep(base: &ExperimentSpec, axis: SweepAxis, values: &[String]) -> Result<SweepResult> {
    sweep_with_cache(base, axis, values, &mut ModelCache::default())
}

/// One run per axis value. Writes `<name>_<axis>.csv` (per-seed rows, then
/// mean and std rows per value) and a matching `.svg` plot.
pub fn sweep_with_cache(
    base: &ExperimentSpec,
    axis: SweepAxis,
    values: &[String],
    cache: &mut ModelCache,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(TrackError::InvalidConfig("sweep needs at least one value".into()));
    }
    base.validate()?;
    let root = base.output_dir.join(format!("{}_{axis}", base.name));
    let mut specs = Vec::with_capacity(values.len());
    for v in values {
        let mut spec = base.clone();
        axis.apply(&mut spec, v)?;
        spec.name = format!("{axis}_{v}");
        spec.output_dir = root.clone();
        specs.push(spec);
    }
    let mut points = Vec::with_capacity(values.len());
    for (v, spec) in values.iter().zip(&specs) {
        points.push((v.clone(), run_experiment_with_cache(spec, cache)?));
    }

    let table = base.output_dir.join(format!("{}_{axis}.csv", base.name));
    let mut w = csv::Writer::from_path(&table)?;
    w.write_record(crate::io::metric_header(&["axis", "value", "seed", "config_hash"]))?;
    for (v, r) in &points {
        let rows = r
            .per_seed
            .iter()
            .map(|(s, rep)| (s.to_string(), rep.values()))
            .chain([("mean".to_string(), r.mean), ("std".to_string(), r.std)]);
        for (seed, vals) in rows {
            let mut rec = vec![axis.to_string(), v.clone(), seed, r.config_hash.clone()];
            rec.extend(vals.iter().map(|x| format_value(*x)));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    let plot = table.with_extension("svg");
    fs::write(&plot, sweep_svg(axis, &points))?;
    Ok(SweepResult {
        axis,
        points,
        table,
        plot,
    })
}

/// Mean IDF1 and MOTA per axis value with one-standard-deviation bars.
fn sweep_svg(axis: SweepAxis, points: &[(String, ExperimentResult)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 50.0);
    let series = [("idf1", "#1f77b4"), ("mota", "#d62728")];
    let stats: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(m, _)| points.iter().map(|(_, r)| r.metric(m).unwrap_or((0.0, 0.0))).collect())
        .collect();
    let lo = stats.iter().flatten().map(|(m, s)| m - s).fold(f64::INFINITY, f64::min).min(0.0);
    let hi = stats.iter().flatten().map(|(m, s)| m + s).fold(f64::NEG_INFINITY, f64::max).max(100.0);
    let n = points.len().max(1);
    let x = |i: usize| left + (w - left - right) * (i as f64 + 0.5) / n as f64;
    let y = |v: f64| top + (h - top - bottom) * (hi - v) / (hi - lo).max(1e-9);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom,
        w - right,
        h - bottom
    ));
    s.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - bottom
    ));
    for tick in [lo, (lo + hi) / 2.0, hi] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{tick:.0}</text>\n",
            left - 6.0,
            y(tick) + 4.0
        ));
    }
    for (i, (v, _)) in points.iter().enumerate() {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{v}</text>\n",
            x(i),
            h - bottom + 18.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{axis}</text>\n",
        (left + w - right) / 2.0,
        h - 10.0
    ));
    for ((name, color), st) in series.iter().zip(&stats) {
        let path: Vec<String> = st
            .iter()
            .enumerate()
            .map(|(i, (m, _))| format!("{:.1},{:.1}", x(i), y(*m)))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for (i, (m, sd)) in st.iter().enumerate() {
            s.push_str(&format!(
                "<line x1=\"{0:.1}\" y1=\"{1:.1}\" x2=\"{0:.1}\" y2=\"{2:.1}\" stroke=\"{color}\"/>\n<circle cx=\"{0:.1}\" cy=\"{3:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                x(i),
                y(m - sd),
                y(m + sd),
                y(*m)
            ));
        }
        let legend_y = if *name == "idf1" { top - 12.0 } else { top + 2.0 };
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{legend_y}\" fill=\"{color}\">{name}</text>\n",
            w - right - 40.0
        ));
    }
    s.push_str("</svg>\n");
    s
}
