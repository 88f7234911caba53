//! Sliding-window track manager.

use std::collections::VecDeque;
use std::num::NonZeroUsize;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ema_aggregate, ema_cost, fuse, hungarian, tac, tmc, CostMatrix};
use crate::branches::{appearance_branch_forward, motion_branch_forward, BranchParams, TokenSet};
use crate::error::{Result, TrackError};
use crate::geometry::{BevGrid, BevPoint};
use crate::kalman::{kf_predict, kf_update, KalmanConfig, KalmanTrack};
use crate::simulator::DetectionFrame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    #[default]
    Fused,
    TmcOnly,
    TacOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionMode {
    /// `p + m` from the motion branch, Kalman only for ∅ slots.
    #[default]
    Attention,
    /// Kalman prediction for every lag.
    Kalman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppearanceMode {
    /// Re-extract every past feature with the current window.
    #[default]
    Tac,
    /// Keep the feature computed when each slot was current.
    Frozen,
    /// One moving-average reference per trajectory.
    Ema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Appearance branch output.
    #[default]
    Branch,
    /// Detection features scaled by `raw_feature_scale`, no branch.
    Raw,
}

/// Maps a detection to a token row: scaled appearance feature followed by
/// two location channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEncoder {
    pub feature_scale: f64,
    /// Meters per unit in the location channels.
    pub location_scale: f64,
    pub origin: BevPoint,
}

impl TokenEncoder {
    pub const LOCATION_CHANNELS: usize = 2;

    pub fn new(model_dim: usize, grid: &BevGrid) -> Self {
        Self {
            feature_scale: (model_dim as f64).sqrt(),
            location_scale: 2.0,
            origin: grid.center(),
        }
    }

    pub fn width(&self, feature_dim: usize) -> usize {
        feature_dim + Self::LOCATION_CHANNELS
    }

    pub fn encode_into(&self, location: BevPoint, feature: &[f64], row: &mut [f64]) {
        let n = feature.len();
        for (r, f) in row.iter_mut().zip(feature) {
            *r = self.feature_scale * f;
        }
        row[n] = (location.x - self.origin.x) / self.location_scale;
        row[n + 1] = (location.y - self.origin.y) / self.location_scale;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Window length `K`.
    pub max_lag: usize,
    pub alpha: f64,
    /// Hungarian threshold on the combined cost.
    pub gate: f64,
    /// Threshold per lag when only the motion cost is used.
    pub tmc_gate_per_lag: f64,
    pub detection_threshold: f64,
    /// Consecutive misses tolerated before a trajectory ends.
    pub max_age: usize,
    pub cost_mode: CostMode,
    pub motion_mode: MotionMode,
    pub appearance_mode: AppearanceMode,
    pub feature_source: FeatureSource,
    pub raw_feature_scale: f64,
    pub ema_momentum: f64,
    pub kalman: KalmanConfig,
    pub encoder: Option<TokenEncoder>,
    pub record_costs: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            max_lag: 7,
            alpha: 0.98,
            gate: 0.1,
            tmc_gate_per_lag: 1.0,
            detection_threshold: 0.4,
            max_age: 7,
            cost_mode: CostMode::Fused,
            motion_mode: MotionMode::Attention,
            appearance_mode: AppearanceMode::Tac,
            feature_source: FeatureSource::Branch,
            raw_feature_scale: 8.0,
            ema_momentum: 0.9,
            kalman: KalmanConfig::for_scenario(2.0, 0.1),
            encoder: None,
            record_costs: false,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_lag == 0 {
            return Err(TrackError::InvalidConfig("window length K must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TrackError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !self.gate.is_finite() || !(self.tmc_gate_per_lag > 0.0) || !self.raw_feature_scale.is_finite() {
            return Err(TrackError::InvalidConfig("gates must be finite and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(TrackError::InvalidConfig("EMA momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        match self.cost_mode {
            CostMode::Fused => self.alpha,
            CostMode::TmcOnly => 0.0,
            CostMode::TacOnly => 1.0,
        }
    }

    pub fn effective_gate(&self) -> f64 {
        match self.cost_mode {
            CostMode::TmcOnly => self.tmc_gate_per_lag * self.max_lag as f64,
            _ => self.gate,
        }
    }

    fn uses_motion_branch(&self) -> bool {
        self.cost_mode != CostMode::TacOnly && self.motion_mode == MotionMode::Attention
    }

    fn uses_appearance(&self) -> bool {
        self.cost_mode != CostMode::TmcOnly
    }

    fn uses_appearance_branch(&self) -> bool {
        self.uses_appearance() && self.feature_source == FeatureSource::Branch
    }

    pub fn needs_branches(&self) -> bool {
        self.uses_motion_branch() || self.uses_appearance_branch()
    }
}

/// One occupied window slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub location: BevPoint,
    pub confidence: f64,
    pub feature: Vec<f64>,
    /// Appearance feature computed when this slot was the current frame.
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    /// `K + 1` slots, newest first.
    pub window: VecDeque<Option<Slot>>,
    pub kalman: KalmanTrack,
    pub age: usize,
    pub misses: usize,
    /// Moving-average appearance direction and norm.
    pub reference: Option<(Vec<f64>, f64)>,
}

impl Trajectory {
    /// Slot at lag `k ≥ 1` as seen from the next frame.
    pub fn slot(&self, lag: usize) -> Option<&Slot> {
        lag.checked_sub(1)
            .and_then(|i| self.window.get(i))
            .and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackerState {
    pub trajectories: Vec<Trajectory>,
    pub next_id: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssociationResult {
    /// `(detection index in the frame, trajectory id)`.
    pub matches: Vec<(usize, usize)>,
    pub births: Vec<usize>,
    pub deaths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub frame: usize,
    pub id: usize,
    pub location: BevPoint,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutput {
    pub frame: usize,
    pub result: AssociationResult,
    pub tracks: Vec<TrackRow>,
    pub costs: Option<CostMatrix>,
    /// Detection index of each cost row.
    pub cost_rows: Vec<usize>,
    /// Trajectory id of each cost column.
    pub cost_cols: Vec<usize>,
}

fn feature_dim(frame: &DetectionFrame, state: &TrackerState) -> Option<usize> {
    frame.detections.first().map(|d| d.feature.len()).or_else(|| {
        state
            .trajectories
            .iter()
            .flat_map(|t| t.window.iter().flatten())
            .map(|s| s.feature.len())
            .next()
    })
}

/// Advances the tracker by one frame.
pub fn step(
    state: &TrackerState,
    frame: &DetectionFrame,
    params: Option<&BranchParams>,
    cfg: &TrackerConfig,
) -> Result<(FrameOutput, TrackerState)> {
    cfg.validate()?;
    let k_max = cfg.max_lag;
    let kept: Vec<usize> = (0..frame.detections.len())
        .filter(|&i| frame.detections[i].confidence > cfg.detection_threshold)
        .collect();
    for &i in &kept {
        let d = &frame.detections[i];
        if !d.location.is_finite() || d.feature.iter().any(|v| !v.is_finite()) {
            return Err(TrackError::NonFinite(format!("detection {i} in frame {}", frame.timestamp)));
        }
    }
    let current: Vec<BevPoint> = kept.iter().map(|&i| frame.detections[i].location).collect();
    let trajs = &state.trajectories;
    let predicted: Vec<(BevPoint, KalmanTrack)> = trajs
        .iter()
        .map(|t| kf_predict(&t.kalman, NonZeroUsize::MIN, &cfg.kalman))
        .collect();

    // Token rows: current detections first, then every occupied past slot.
    let mut token_of: Vec<Vec<Option<usize>>> = vec![vec![None; k_max]; trajs.len()];
    let mut appearance: Option<DMatrix<f64>> = None;
    let mut motion_out: Option<Vec<Option<[f64; 2]>>> = None;
    if cfg.needs_branches() {
        let params = params.ok_or_else(|| {
            TrackError::InvalidConfig("this cost configuration needs trained branches".into())
        })?;
        let dim = feature_dim(frame, state).unwrap_or(params.config.dim - TokenEncoder::LOCATION_CHANNELS);
        let encoder = cfg.encoder.ok_or_else(|| {
            TrackError::InvalidConfig("tracker needs a token encoder to run the branches".into())
        })?;
        let width = encoder.width(dim);
        let mut rows: Vec<(BevPoint, &[f64], Option<usize>, usize)> = kept
            .iter()
            .map(|&i| {
                let d = &frame.detections[i];
                (d.location, d.feature.as_slice(), None, 0)
            })
            .collect();
        for (j, t) in trajs.iter().enumerate() {
            for k in 1..=k_max {
                if let Some(s) = t.slot(k) {
                    token_of[j][k - 1] = Some(rows.len());
                    rows.push((s.location, s.feature.as_slice(), Some(j), k));
                }
            }
        }
        let mut features = DMatrix::zeros(rows.len(), width);
        let mut buf = vec![0.0; width];
        for (r, (loc, f, _, _)) in rows.iter().enumerate() {
            if f.len() != dim {
                return Err(TrackError::ShapeMismatch(format!(
                    "feature width {} but expected {dim}",
                    f.len()
                )));
            }
            encoder.encode_into(*loc, f, &mut buf);
            for (c, v) in buf.iter().enumerate() {
                features[(r, c)] = *v;
            }
        }
        let tokens = TokenSet::new(
            features,
            rows.iter().map(|r| r.2).collect(),
            rows.iter().map(|r| r.3).collect(),
            k_max,
        )?;
        if cfg.uses_motion_branch() {
            motion_out = Some(motion_branch_forward(params, &tokens)?);
        }
        if cfg.uses_appearance_branch() {
            appearance = Some(appearance_branch_forward(params, &tokens)?);
        }
    }
    if cfg.uses_appearance() && cfg.feature_source == FeatureSource::Raw {
        appearance = Some(raw_appearance(frame, &kept, state, &mut token_of, cfg)?);
    }

    let (n_cur, n_past) = (current.len(), trajs.len());
    let tmc_m = if cfg.cost_mode == CostMode::TacOnly {
        DMatrix::zeros(n_cur, n_past)
    } else {
        let fallback: Vec<BevPoint> = predicted.iter().map(|p| p.0).collect();
        let (slots, motions): (Vec<_>, Vec<_>) = match &motion_out {
            Some(m) => trajs
                .iter()
                .enumerate()
                .map(|(j, t)| {
                    (1..=k_max)
                        .map(|k| {
                            let loc = t.slot(k).map(|s| s.location);
                            (loc, token_of[j][k - 1].and_then(|r| m[r]))
                        })
                        .unzip()
                })
                .unzip(),
            None => (vec![vec![None; k_max]; n_past], vec![vec![None; k_max]; n_past]),
        };
        tmc(&current, &slots, &motions, &fallback)?
    };
    let row_vec = |d: &DMatrix<f64>, r: usize| d.row(r).iter().copied().collect::<Vec<f64>>();
    let current_d: Vec<Vec<f64>> = match &appearance {
        Some(d) => (0..n_cur).map(|i| row_vec(d, i)).collect(),
        None => vec![Vec::new(); n_cur],
    };
    let tac_m = match &appearance {
        None => DMatrix::zeros(n_cur, n_past),
        Some(d) => match cfg.appearance_mode {
            AppearanceMode::Tac => {
                let past: Vec<Vec<Option<Vec<f64>>>> = token_of
                    .iter()
                    .map(|lags| lags.iter().map(|r| r.map(|r| row_vec(d, r))).collect())
                    .collect();
                tac(&current_d, &past, k_max)?
            }
            AppearanceMode::Frozen => {
                let past: Vec<Vec<Option<Vec<f64>>>> = trajs
                    .iter()
                    .map(|t| (1..=k_max).map(|k| t.slot(k).map(|s| s.appearance.clone())).collect())
                    .collect();
                tac(&current_d, &past, k_max)?
            }
            AppearanceMode::Ema => {
                let refs: Vec<Vec<f64>> = trajs
                    .iter()
                    .map(|t| match &t.reference {
                        Some((u, r)) => u.iter().map(|v| v * r).collect(),
                        None => vec![0.0; current_d.first().map_or(0, Vec::len)],
                    })
                    .collect();
                ema_cost(&current_d, &refs, k_max)
            }
        },
    };
    let costs = fuse(tmc_m, tac_m, cfg.effective_alpha())?;
    let pairs = hungarian(&costs.combined, cfg.effective_gate())?;

    // State update.
    let mut matched_det: Vec<Option<usize>> = vec![None; n_past];
    let mut det_taken = vec![false; n_cur];
    for &(i, j) in &pairs {
        matched_det[j] = Some(i);
        det_taken[i] = true;
    }
    let make_slot = |i: usize| {
        let d = &frame.detections[kept[i]];
        Slot {
            location: d.location,
            confidence: d.confidence,
            feature: d.feature.clone(),
            appearance: current_d[i].clone(),
        }
    };
    let mut next = TrackerState {
        trajectories: Vec::with_capacity(n_past + n_cur),
        next_id: state.next_id,
    };
    let mut result = AssociationResult::default();
    let mut tracks = Vec::new();
    for (j, t) in trajs.iter().enumerate() {
        let mut t = t.clone();
        t.age += 1;
        match matched_det[j] {
            Some(i) => {
                let slot = make_slot(i);
                t.kalman = kf_update(&predicted[j].1, slot.location, &cfg.kalman)?;
                t.kalman.last_update_timestep = frame.timestamp as i64;
                if cfg.appearance_mode == AppearanceMode::Ema && !slot.appearance.is_empty() {
                    t.reference = Some(update_reference(t.reference.take(), &slot.appearance, cfg.ema_momentum));
                }
                t.misses = 0;
                tracks.push(TrackRow {
                    frame: frame.timestamp,
                    id: t.id,
                    location: slot.location,
                    confidence: slot.confidence,
                });
                result.matches.push((kept[i], t.id));
                t.window.push_front(Some(slot));
            }
            None => {
                t.kalman = predicted[j].1.clone();
                t.misses += 1;
                t.window.push_front(None);
            }
        }
        t.window.truncate(k_max + 1);
        if t.misses > cfg.max_age || t.window.iter().all(Option::is_none) {
            result.deaths.push(t.id);
        } else {
            next.trajectories.push(t);
        }
    }
    for i in (0..n_cur).filter(|&i| !det_taken[i]) {
        let slot = make_slot(i);
        let id = next.next_id;
        next.next_id += 1;
        let reference = (cfg.appearance_mode == AppearanceMode::Ema && !slot.appearance.is_empty())
            .then(|| update_reference(None, &slot.appearance, cfg.ema_momentum));
        let mut window = VecDeque::with_capacity(k_max + 1);
        tracks.push(TrackRow {
            frame: frame.timestamp,
            id,
            location: slot.location,
            confidence: slot.confidence,
        });
        let kalman = KalmanTrack::new(slot.location, frame.timestamp as i64, &cfg.kalman);
        window.push_back(Some(slot));
        window.extend(std::iter::repeat_n(None, k_max));
        next.trajectories.push(Trajectory {
            id,
            window,
            kalman,
            age: 0,
            misses: 0,
            reference,
        });
        result.births.push(kept[i]);
    }
    result.matches.sort_unstable();
    tracks.sort_by_key(|r| r.id);
    let cost_cols = trajs.iter().map(|t| t.id).collect();
    Ok((
        FrameOutput {
            frame: frame.timestamp,
            result,
            tracks,
            costs: cfg.record_costs.then_some(costs),
            cost_rows: kept,
            cost_cols,
        },
        next,
    ))
}

/// Raw-feature rows laid out like the branch output: current detections
/// first, then every occupied past slot.
fn raw_appearance(
    frame: &DetectionFrame,
    kept: &[usize],
    state: &TrackerState,
    token_of: &mut [Vec<Option<usize>>],
    cfg: &TrackerConfig,
) -> Result<DMatrix<f64>> {
    let dim = feature_dim(frame, state).unwrap_or(0);
    let mut rows: Vec<&[f64]> = kept.iter().map(|&i| frame.detections[i].feature.as_slice()).collect();
    for (j, t) in state.trajectories.iter().enumerate() {
        for k in 1..=cfg.max_lag {
            token_of[j][k - 1] = t.slot(k).map(|s| {
                rows.push(&s.feature);
                rows.len() - 1
            });
        }
    }
    if rows.iter().any(|r| r.len() != dim) {
        return Err(TrackError::ShapeMismatch("detection feature widths differ".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), dim, |r, c| cfg.raw_feature_scale * rows[r][c]))
}

fn update_reference(prev: Option<(Vec<f64>, f64)>, d: &[f64], momentum: f64) -> (Vec<f64>, f64) {
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    match prev {
        None => (ema_aggregate(d, d, 1.0), norm),
        Some((u, r)) => {
            let unit: Vec<f64> = d.iter().map(|v| v / norm.max(f64::MIN_POSITIVE)).collect();
            (
                ema_aggregate(&u, &unit, momentum),
                momentum * r + (1.0 - momentum) * norm,
            )
        }
    }
}

/// Owns the configuration, the branches and the running state.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    params: Option<BranchParams>,
    state: TrackerState,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, params: Option<BranchParams>) -> Result<Self> {
        cfg.validate()?;
        if cfg.needs_branches() && params.is_none() {
            return Err(TrackError::InvalidConfig(
                "this cost configuration needs trained branches".into(),
            ));
        }
        Ok(Self {
            cfg,
            params,
            state: TrackerState::default(),
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrackerState {
        &self.state
    }

    pub fn step(&mut self, frame: &DetectionFrame) -> Result<FrameOutput> {
        let (out, next) = step(&self.state, frame, self.params.as_ref(), &self.cfg)?;
        self.state = next;
        Ok(out)
    }

    pub fn run(&mut self, frames: &[DetectionFrame]) -> Result<Vec<FrameOutput>> {
        frames.iter().map(|f| self.step(f)).collect()
    }
}
