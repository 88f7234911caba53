//! Small separable training set used to check that the trainer makes
//! progress: every pedestrian has a distinct identity vector and a fixed
//! velocity, so both the motion and the appearance targets are learnable.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::loss::TrainingWindow;
use super::TokenSet;
use crate::error::{Result, TrackError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub pedestrians: usize,
    pub dim: usize,
    pub max_lag: usize,
    pub windows: usize,
    /// Scale of the identity part of each token.
    pub identity_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            pedestrians: 4,
            dim: 16,
            max_lag: 3,
            windows: 8,
            identity_scale: 2.0,
        }
    }
}

/// Token layout: identity vector in channels `0..dim-2`, position in the
/// last two channels. Offsets are `k·vₙ` for lag `k`.
pub fn toy_windows(cfg: &ToyConfig, seed: u64) -> Result<Vec<TrainingWindow>> {
    if cfg.dim < 3 || cfg.pedestrians == 0 || cfg.windows == 0 {
        return Err(TrackError::InvalidConfig(
            "toy set needs dim ≥ 3, at least one pedestrian and one window".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id_dim = cfg.dim - 2;
    let identities: Vec<Vec<f64>> = (0..cfg.pedestrians)
        .map(|_| {
            let v: Vec<f64> = (0..id_dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| cfg.identity_scale * x / n).collect()
        })
        .collect();
    let velocities: Vec<[f64; 2]> = (0..cfg.pedestrians)
        .map(|_| {
            let speed = rng.random_range(0.5..1.5);
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            [speed * heading.cos(), speed * heading.sin()]
        })
        .collect();

    let tokens_per_window = cfg.pedestrians * (cfg.max_lag + 1);
    let mut out = Vec::with_capacity(cfg.windows);
    for _ in 0..cfg.windows {
        let mut features = DMatrix::zeros(tokens_per_window, cfg.dim);
        let mut pedestrians = Vec::with_capacity(tokens_per_window);
        let mut lags = Vec::with_capacity(tokens_per_window);
        let mut offsets = Vec::with_capacity(tokens_per_window);
        let mut row = 0;
        for n in 0..cfg.pedestrians {
            let p0 = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let v = velocities[n];
            for k in 0..=cfg.max_lag {
                for (c, x) in identities[n].iter().enumerate() {
                    features[(row, c)] = *x;
                }
                features[(row, id_dim)] = p0[0] - k as f64 * v[0];
                features[(row, id_dim + 1)] = p0[1] - k as f64 * v[1];
                pedestrians.push(Some(n));
                lags.push(k);
                offsets.push((k >= 1).then(|| [k as f64 * v[0], k as f64 * v[1]]));
                row += 1;
            }
        }
        let tokens = TokenSet::new(features, pedestrians, lags, cfg.max_lag)?;
        out.push(TrainingWindow::new(tokens, offsets, 0.0)?);
    }
    Ok(out)
}
