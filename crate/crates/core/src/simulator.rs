//! Synthetic multi-camera pedestrian scenarios.
//!
//! Pedestrians move with piecewise constant velocity, their heading jittered
//! every frame and reflected at the grid border. Each frame yields noisy
//! detections with appearance features drawn around a per-identity canonical
//! embedding, plus uniformly scattered clutter.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Result, TrackError};
use crate::geometry::{project_ground_to_pixel, BevGrid, BevPoint, CameraModel};

/// Miss probability multiplier for pedestrians seen by fewer than two cameras.
pub const LOW_VISIBILITY_MISS_SCALE: f64 = 1.5;
/// Confidence range of true-positive detections.
pub const TRUE_CONFIDENCE_RANGE: (f64, f64) = (0.5, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: BevGrid,
    pub cameras: Vec<CameraModel>,
    pub num_pedestrians: usize,
    pub num_frames: usize,
    /// Frames per second.
    pub frame_rate: f64,
    /// Walking speed range in m/s.
    pub speed_range: [f64; 2],
    /// Per-frame heading jitter (radians, std-dev).
    pub turn_noise: f64,
    pub embed_dim: usize,
    /// Expected L2 norm of the feature perturbation; each component has
    /// std-dev `embed_noise / sqrt(embed_dim)`.
    pub embed_noise: f64,
    pub miss_prob: f64,
    /// Expected clutter detections per frame.
    pub clutter_rate: f64,
    /// Location noise std-dev per axis (m).
    pub loc_noise: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let grid = BevGrid {
            width_cells: 480,
            height_cells: 480,
            cell_size: 0.025,
        };
        Self {
            cameras: default_cameras(&grid),
            grid,
            num_pedestrians: 15,
            num_frames: 100,
            frame_rate: 2.0,
            speed_range: [0.5, 1.5],
            turn_noise: 0.15,
            embed_dim: 62,
            embed_noise: 0.2,
            miss_prob: 0.2,
            clutter_rate: 2.0,
            loc_noise: 0.1,
            seed: 0,
        }
    }
}

/// Four elevated cameras, one beyond each corner of the grid, aimed at the
/// center.
pub fn default_cameras(grid: &BevGrid) -> Vec<CameraModel> {
    let (w, h) = grid.extent();
    let target = Vector3::new(0.5 * w, 0.5 * h, 0.0);
    let margin = 0.15 * w.max(h);
    let corners = [
        (-margin, -margin),
        (w + margin, -margin),
        (w + margin, h + margin),
        (-margin, h + margin),
    ];
    corners
        .iter()
        .map(|&(x, y)| {
            CameraModel::look_at(Vector3::new(x, y, 0.6 * w.max(h)), target, 700.0, (720, 1280))
                .expect("corner cameras are well-posed")
        })
        .collect()
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let bad = |m: &str| Err(TrackError::InvalidConfig(m.to_string()));
        if self.num_frames == 0 {
            return bad("num_frames must be positive");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive");
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad("frame_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.miss_prob) {
            return bad("miss_prob must lie in [0, 1]");
        }
        if !(self.clutter_rate >= 0.0 && self.clutter_rate.is_finite()) {
            return bad("clutter_rate must be non-negative");
        }
        for (name, v) in [
            ("loc_noise", self.loc_noise),
            ("embed_noise", self.embed_noise),
            ("turn_noise", self.turn_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be non-negative"));
            }
        }
        let [lo, hi] = self.speed_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("speed_range must satisfy 0 <= lo <= hi");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Per frame, `(pedestrian_id, location)` sorted by id.
    pub frames: Vec<Vec<(usize, BevPoint)>>,
    /// Unit-norm canonical embedding per pedestrian id.
    pub embeddings: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn location(&self, frame: usize, id: usize) -> Option<BevPoint> {
        self.frames
            .get(frame)?
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, p)| *p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub location: BevPoint,
    pub confidence: f64,
    pub feature: Vec<f64>,
    /// `None` for clutter.
    pub truth_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub timestamp: usize,
    pub detections: Vec<Detection>,
}

/// Number of cameras that see `point`.
pub fn occlusion_visibility(cfg: &ScenarioConfig, point: BevPoint) -> usize {
    cfg.cameras
        .iter()
        .filter(|cam| project_ground_to_pixel(cam, point).is_some())
        .count()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

struct Walker {
    pos: BevPoint,
    heading: f64,
    speed: f64,
}

impl Walker {
    fn step(&mut self, dt: f64, turn: f64, grid: &BevGrid) {
        self.heading += turn;
        let mut x = self.pos.x + self.speed * dt * self.heading.cos();
        let mut y = self.pos.y + self.speed * dt * self.heading.sin();
        let (w, h) = grid.extent();
        if x < 0.0 {
            x = -x;
            self.heading = PI - self.heading;
        } else if x >= w {
            x = 2.0 * w - x;
            self.heading = PI - self.heading;
        }
        if y < 0.0 {
            y = -y;
            self.heading = -self.heading;
        } else if y >= h {
            y = 2.0 * h - y;
            self.heading = -self.heading;
        }
        self.heading = self.heading.rem_euclid(2.0 * PI);
        self.pos = grid.clamp(BevPoint::new(x, y));
    }
}

/// Generates ground truth and per-frame detections. Deterministic in `cfg`.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<(GroundTruth, Vec<DetectionFrame>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.embed_dim;
    let (w, h) = cfg.grid.extent();
    let embeddings: Vec<Vec<f64>> = (0..cfg.num_pedestrians)
        .map(|_| unit_gaussian(&mut rng, dim))
        .collect();
    let mut walkers: Vec<Walker> = (0..cfg.num_pedestrians)
        .map(|_| Walker {
            pos: cfg
                .grid
                .clamp(BevPoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h))),
            heading: rng.random_range(0.0..2.0 * PI),
            speed: if cfg.speed_range[1] > cfg.speed_range[0] {
                rng.random_range(cfg.speed_range[0]..cfg.speed_range[1])
            } else {
                cfg.speed_range[0]
            },
        })
        .collect();

    let turn = Normal::new(0.0, cfg.turn_noise).expect("validated");
    let loc = Normal::new(0.0, cfg.loc_noise).expect("validated");
    let feat = Normal::new(0.0, cfg.embed_noise / (dim as f64).sqrt()).expect("validated");
    let clutter = (cfg.clutter_rate > 0.0)
        .then(|| Poisson::new(cfg.clutter_rate).expect("validated"));

    let mut gt_frames = Vec::with_capacity(cfg.num_frames);
    let mut det_frames = Vec::with_capacity(cfg.num_frames);
    for t in 0..cfg.num_frames {
        if t > 0 {
            for walker in walkers.iter_mut() {
                let dtheta = turn.sample(&mut rng);
                walker.step(cfg.dt(), dtheta, &cfg.grid);
            }
        }
        gt_frames.push(
            walkers
                .iter()
                .enumerate()
                .map(|(id, wk)| (id, wk.pos))
                .collect::<Vec<_>>(),
        );

        let mut detections = Vec::new();
        for (id, walker) in walkers.iter().enumerate() {
            let visible = occlusion_visibility(cfg, walker.pos);
            let p_miss = if visible < 2 {
                (cfg.miss_prob * LOW_VISIBILITY_MISS_SCALE).min(1.0)
            } else {
                cfg.miss_prob
            };
            if rng.random::<f64>() < p_miss {
                continue;
            }
            let location = if cfg.loc_noise > 0.0 {
                cfg.grid.clamp(BevPoint::new(
                    walker.pos.x + loc.sample(&mut rng),
                    walker.pos.y + loc.sample(&mut rng),
                ))
            } else {
                walker.pos
            };
            let feature = if cfg.embed_noise > 0.0 {
                let mut f: Vec<f64> = embeddings[id]
                    .iter()
                    .map(|c| c + feat.sample(&mut rng))
                    .collect();
                normalize(&mut f);
                f
            } else {
                embeddings[id].clone()
            };
            let confidence = rng.random_range(TRUE_CONFIDENCE_RANGE.0..TRUE_CONFIDENCE_RANGE.1);
            detections.push(Detection {
                location,
                confidence,
                feature,
                truth_id: Some(id),
            });
        }
        if let Some(poisson) = &clutter {
            let count = poisson.sample(&mut rng) as usize;
            for _ in 0..count {
                let location = cfg
                    .grid
                    .clamp(BevPoint::new(rng.random_range(0.0..w), rng.random_range(0.0..h)));
                let feature = unit_gaussian(&mut rng, dim);
                let confidence = rng.random::<f64>();
                detections.push(Detection {
                    location,
                    confidence,
                    feature,
                    truth_id: None,
                });
            }
        }
        detections.shuffle(&mut rng);
        det_frames.push(DetectionFrame {
            timestamp: t,
            detections,
        });
    }
    Ok((
        GroundTruth {
            frames: gt_frames,
            embeddings,
        },
        det_frames,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            num_pedestrians: 6,
            num_frames: 30,
            miss_prob: 0.0,
            clutter_rate: 0.0,
            loc_noise: 0.0,
            embed_noise: 0.0,
            seed,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn zero_noise_detections_equal_truth() {
        let cfg = quiet(3);
        let (gt, frames) = generate_scenario(&cfg).unwrap();
        for (t, frame) in frames.iter().enumerate() {
            assert_eq!(frame.detections.len(), cfg.num_pedestrians);
            for det in &frame.detections {
                let id = det.truth_id.unwrap();
                assert_eq!(Some(det.location), gt.location(t, id));
                assert_eq!(det.feature, gt.embeddings[id]);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let cfg = ScenarioConfig {
            num_frames: 20,
            seed: 99,
            ..ScenarioConfig::default()
        };
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scenario(&ScenarioConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn truth_stays_inside_and_ids_unique() {
        let cfg = ScenarioConfig {
            num_frames: 200,
            speed_range: [1.5, 3.0],
            seed: 4,
            ..ScenarioConfig::default()
        };
        let (gt, frames) = generate_scenario(&cfg).unwrap();
        for frame in &gt.frames {
            let mut ids: Vec<_> = frame.iter().map(|(i, _)| *i).collect();
            ids.dedup();
            assert_eq!(ids.len(), cfg.num_pedestrians);
            assert!(frame.iter().all(|(_, p)| cfg.grid.contains(p)));
        }
        for frame in &frames {
            for det in &frame.detections {
                assert!(det.feature.iter().all(|v| v.is_finite()));
                assert!((0.0..=1.0).contains(&det.confidence));
                if det.truth_id.is_some() {
                    let n: f64 = det.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((n - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn noiseless_feature_dot_products() {
        let cfg = ScenarioConfig {
            miss_prob: 0.1,
            embed_noise: 0.0,
            clutter_rate: 0.0,
            num_frames: 5,
            seed: 8,
            ..ScenarioConfig::default()
        };
        let (gt, frames) = generate_scenario(&cfg).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let dets: Vec<&Detection> = frames.iter().flat_map(|f| &f.detections).collect();
        for a in &dets {
            for b in &dets {
                let (ia, ib) = (a.truth_id.unwrap(), b.truth_id.unwrap());
                let d = dot(&a.feature, &b.feature);
                if ia == ib {
                    assert!((d - 1.0).abs() < 1e-12);
                } else {
                    assert!((d - dot(&gt.embeddings[ia], &gt.embeddings[ib])).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn visibility_without_cameras_is_zero() {
        let cfg = ScenarioConfig {
            cameras: vec![],
            ..ScenarioConfig::default()
        };
        assert_eq!(occlusion_visibility(&cfg, BevPoint::new(6.0, 6.0)), 0);
    }

    #[test]
    fn center_is_seen_by_all_default_cameras() {
        let cfg = ScenarioConfig::default();
        assert_eq!(
            occlusion_visibility(&cfg, cfg.grid.center()),
            cfg.cameras.len()
        );
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            ScenarioConfig {
                miss_prob: 1.5,
                ..ScenarioConfig::default()
            },
            ScenarioConfig {
                frame_rate: 0.0,
                ..ScenarioConfig::default()
            },
            ScenarioConfig {
                embed_dim: 0,
                ..ScenarioConfig::default()
            },
            ScenarioConfig {
                num_frames: 0,
                ..ScenarioConfig::default()
            },
        ] {
            assert!(matches!(
                generate_scenario(&cfg),
                Err(TrackError::InvalidConfig(_))
            ));
        }
    }
}
