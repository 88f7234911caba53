//! Constant-velocity Kalman filter on the ground plane.
//!
//! State is `(x, y, vx, vy)` in meters and m/s. Tracks are plain values:
//! `predict` and `update` return new tracks and never mutate in place.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use std::num::NonZeroUsize;

use crate::error::{Result, TrackError};
use crate::geometry::BevPoint;

/// Filter noise settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    /// Seconds per frame.
    pub dt: f64,
    /// Process noise diagonal per second, scaled by `dt` at each step.
    pub process_noise: [f64; 4],
    /// Measurement variance per axis (m²).
    pub measurement_var: f64,
    /// Initial covariance diagonal for new tracks.
    pub initial_var: [f64; 4],
}

impl KalmanConfig {
    pub const MEASUREMENT_VAR_FLOOR: f64 = 0.01;

    /// Defaults matched to a simulator frame rate and location noise.
    pub fn for_scenario(frame_rate: f64, loc_noise: f64) -> Self {
        Self {
            dt: 1.0 / frame_rate,
            process_noise: [0.01, 0.01, 0.1, 0.1],
            measurement_var: (loc_noise * loc_noise).max(Self::MEASUREMENT_VAR_FLOOR),
            initial_var: [1.0, 1.0, 10.0, 10.0],
        }
    }

    fn transition(&self) -> Matrix4<f64> {
        let mut f = Matrix4::identity();
        f[(0, 2)] = self.dt;
        f[(1, 3)] = self.dt;
        f
    }

    fn process(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::from(self.process_noise)) * self.dt
    }
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self::for_scenario(2.0, 0.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanTrack {
    pub state: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub last_update_timestep: i64,
}

impl KalmanTrack {
    /// Starts a track at `observation` with zero velocity.
    pub fn new(observation: BevPoint, timestep: i64, cfg: &KalmanConfig) -> Self {
        Self {
            state: Vector4::new(observation.x, observation.y, 0.0, 0.0),
            covariance: Matrix4::from_diagonal(&Vector4::from(cfg.initial_var)),
            last_update_timestep: timestep,
        }
    }

    pub fn position(&self) -> BevPoint {
        BevPoint::new(self.state.x, self.state.y)
    }

    pub fn velocity(&self) -> (f64, f64) {
        (self.state.z, self.state.w)
    }

    pub fn predict(&self, steps: NonZeroUsize, cfg: &KalmanConfig) -> (BevPoint, KalmanTrack) {
        kf_predict(self, steps, cfg)
    }

    pub fn update(&self, observation: BevPoint, cfg: &KalmanConfig) -> Result<KalmanTrack> {
        kf_update(self, observation, cfg)
    }
}

fn symmetrize(m: &Matrix4<f64>) -> Matrix4<f64> {
    (m + m.transpose()) * 0.5
}

/// Propagates the track `steps` frames ahead.
pub fn kf_predict(
    track: &KalmanTrack,
    steps: NonZeroUsize,
    cfg: &KalmanConfig,
) -> (BevPoint, KalmanTrack) {
    let f = cfg.transition();
    let q = cfg.process();
    let mut state = track.state;
    let mut cov = track.covariance;
    for _ in 0..steps.get() {
        state = f * state;
        cov = symmetrize(&(f * cov * f.transpose() + q));
    }
    let next = KalmanTrack {
        state,
        covariance: cov,
        last_update_timestep: track.last_update_timestep,
    };
    (next.position(), next)
}

/// Measurement update with a position observation (Joseph form).
pub fn kf_update(
    track: &KalmanTrack,
    observation: BevPoint,
    cfg: &KalmanConfig,
) -> Result<KalmanTrack> {
    if !observation.is_finite() {
        return Err(TrackError::NonFinite(format!(
            "Kalman observation ({}, {})",
            observation.x, observation.y
        )));
    }
    let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let r = Matrix2::identity() * cfg.measurement_var;
    let p = track.covariance;
    let innovation = Vector2::new(observation.x, observation.y) - h * track.state;
    let s = h * p * h.transpose() + r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| TrackError::NonFinite("singular innovation covariance".into()))?;
    let gain = p * h.transpose() * s_inv;
    let state = track.state + gain * innovation;
    let i_kh = Matrix4::identity() - gain * h;
    let cov = symmetrize(&(i_kh * p * i_kh.transpose() + gain * r * gain.transpose()));
    Ok(KalmanTrack {
        state,
        covariance: cov,
        last_update_timestep: track.last_update_timestep + 1,
    })
}
