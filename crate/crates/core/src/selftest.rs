//! Oracle suites shared by the `selftest` command and the acceptance tests.
//! Each suite returns one [`Check`] with a short human-readable detail.

use std::num::NonZeroUsize;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::association::{fuse, solve_assignment, tac, tmc};
use crate::branches::{
    forward_losses, loss_det, loss_tac, loss_tmc, toy_windows, train, BranchConfig, BranchParams, LossReport,
    ToyConfig, TrainConfig,
};
use crate::geometry::{pixel_to_ground, project_ground_to_pixel, BevGrid, BevPoint, CameraModel, OccupancyMap};
use crate::kalman::{kf_predict, kf_update, KalmanConfig, KalmanTrack};
use crate::metrics::{evaluate_detection, evaluate_tracking, EvalConfig};
use crate::oracle::{self, max_abs_diff, random_cost_instance, random_integer_matrix, to_rows};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }

    fn failed(name: &'static str, err: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {err}"))
    }

    /// `PASS name: detail` or `FAIL name: detail`.
    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Rectangular assignment totals against exhaustive permutation search.
pub fn hungarian_optimality(count: usize, seed: u64) -> Check {
    let name = "hungarian_optimality";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    for _ in 0..count {
        let m = random_integer_matrix(&mut rng);
        let pairs = match solve_assignment(&m) {
            Ok(p) => p,
            Err(e) => return Check::failed(name, e),
        };
        let total: f64 = pairs.iter().map(|&(i, j)| m[(i, j)]).sum();
        if pairs.len() != m.nrows().min(m.ncols()) || total != oracle::brute_force_assignment(&to_rows(&m)) {
            mismatches += 1;
        }
    }
    Check::new(name, mismatches == 0, format!("{mismatches} of {count} matrices off the exhaustive minimum"))
}

fn random_maps<R: Rng>(rng: &mut R, grid: BevGrid, count: usize) -> Vec<OccupancyMap> {
    (0..count)
        .map(|_| {
            let values = (0..grid.num_cells()).map(|_| rng.random_range(0.0..1.0)).collect();
            OccupancyMap::from_values(grid, values).expect("sized to the grid")
        })
        .collect()
}

/// Worst deviation of each optimized cost and loss from its naive loop.
pub fn cost_oracles(count: usize, seed: u64) -> Check {
    let name = "cost_oracles";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 6];
    let grid = BevGrid::new(7, 5, 0.5).expect("valid grid");
    for _ in 0..count {
        let inst = random_cost_instance(&mut rng);
        let result = (|| -> crate::Result<[f64; 6]> {
            let fast_m = tmc(&inst.current, &inst.slots, &inst.motions, &inst.fallback)?;
            let slow_m = oracle::tmc(&inst.current, &inst.slots, &inst.motions, &inst.fallback);
            let fast_a = tac(&inst.current_features, &inst.past_features, inst.max_lag)?;
            let slow_a = oracle::tac(&inst.current_features, &inst.past_features, inst.max_lag);
            let alpha = rng.random_range(0.0..=1.0);
            let d_tmc = max_abs_diff(&fast_m, &slow_m);
            let d_tac = max_abs_diff(&fast_a, &slow_a);
            let fused = fuse(fast_m, fast_a, alpha)?;
            let d_fuse = max_abs_diff(&fused.combined, &oracle::fuse(&slow_m, &slow_a, alpha));

            let maps = inst.max_lag + 1;
            let pred = random_maps(&mut rng, grid, maps);
            let target = random_maps(&mut rng, grid, maps);
            let rows = |m: &[OccupancyMap]| m.iter().map(|x| x.values().to_vec()).collect::<Vec<_>>();
            let d_det = (loss_det(&pred, &target)? - oracle::loss_det(&rows(&pred), &rows(&target))).abs();

            let n = inst.current.len();
            let motions: Vec<[f64; 2]> = (0..n * inst.max_lag)
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect();
            let offsets: Vec<[f64; 2]> = (0..motions.len())
                .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect();
            let d_loss_tmc = (loss_tmc(&motions, &offsets)? - oracle::loss_tmc(&motions, &offsets)).abs();

            // One token per present (pedestrian, lag) pair plus some unlabelled ones.
            let dim = inst.current_features[0].len();
            let (mut lags, mut ids) = (Vec::new(), Vec::new());
            for lag in 0..=inst.max_lag {
                for ped in 0..n {
                    if lag == 0 || rng.random_bool(0.75) {
                        lags.push(lag);
                        ids.push(Some(ped));
                    }
                }
                if rng.random_bool(0.3) {
                    lags.push(lag);
                    ids.push(None);
                }
            }
            let feats = DMatrix::from_fn(lags.len(), dim, |_, _| rng.random_range(-2.0..2.0));
            let d_loss_tac = (loss_tac(&feats, &lags, &ids)? - oracle::loss_tac(&to_rows(&feats), &lags, &ids)).abs();
            Ok([d_tmc, d_tac, d_fuse, d_det, d_loss_tmc, d_loss_tac])
        })();
        match result {
            Ok(d) => worst.iter_mut().zip(d).for_each(|(w, v)| *w = w.max(v)),
            Err(e) => return Check::failed(name, e),
        }
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    Check::new(
        name,
        max < 1e-10,
        format!(
            "max |fast - naive| tmc {:.1e} tac {:.1e} fuse {:.1e} loss_det {:.1e} loss_tmc {:.1e} loss_tac {:.1e} over {count} instances",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5]
        ),
    )
}

/// Architectures and toy windows used by the gradient check.
pub fn gradient_configs() -> Vec<(BranchConfig, ToyConfig)> {
    let bc = |dim, heads, blocks, ffn_dim, max_lag| BranchConfig {
        dim,
        heads,
        blocks,
        ffn_dim,
        max_lag,
        dropout: 0.0,
    };
    let tc = |pedestrians, dim, max_lag| ToyConfig {
        pedestrians,
        dim,
        max_lag,
        windows: 1,
        ..ToyConfig::default()
    };
    vec![
        (bc(16, 2, 1, 32, 3), tc(3, 16, 3)),
        (bc(8, 1, 2, 16, 2), tc(4, 8, 2)),
        (bc(12, 3, 2, 8, 4), tc(2, 12, 4)),
    ]
}

/// Initialized parameters with extra uniform jitter so that no tensor sits
/// at a symmetric point such as identity layer norms.
pub fn jittered_params(config: BranchConfig, seed: u64) -> crate::Result<BranchParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = BranchParams::init(config, &mut rng)?;
    p.for_each_tensor_mut(|_, t| t.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1)));
    Ok(p)
}

/// Central differences of the total loss on every tensor.
pub fn gradients(per_tensor: usize, seed: u64) -> Check {
    let name = "gradients";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: (f64, String) = (0.0, String::new());
    for (i, (bc, tc)) in gradient_configs().into_iter().enumerate() {
        let mut run = || -> crate::Result<Vec<oracle::GradientCheck>> {
            let params = jittered_params(bc, seed.wrapping_add(100 + i as u64))?;
            let windows = toy_windows(&tc, seed.wrapping_add(200 + i as u64))?;
            oracle::gradient_check(&params, &windows[0], per_tensor, 1e-5, &mut rng)
        };
        match run() {
            Ok(report) => {
                for r in report {
                    if r.max_rel_error >= worst.0 {
                        worst = (r.max_rel_error, format!("config {i} {}", r.tensor));
                    }
                }
            }
            Err(e) => return Check::failed(name, e),
        }
    }
    Check::new(
        name,
        worst.0 < 1e-4,
        format!("max relative error {:.2e} ({}) over 3 configurations", worst.0, worst.1),
    )
}

/// Three-step-ahead prediction after two noiseless constant-velocity updates.
pub fn kalman_exactness(count: usize, seed: u64) -> Check {
    let name = "kalman_exactness";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exact = KalmanConfig {
        measurement_var: 0.0,
        process_noise: [0.0; 4],
        ..KalmanConfig::for_scenario(2.0, 0.0)
    };
    let dt = exact.dt;
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let (x0, y0) = (rng.random_range(0.0..12.0), rng.random_range(0.0..12.0));
        let (vx, vy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
        let truth = |t: f64| BevPoint::new(x0 + vx * t, y0 + vy * t);
        let run = || -> crate::Result<BevPoint> {
            let t0 = kf_update(&KalmanTrack::new(truth(0.0), 0, &exact), truth(0.0), &exact)?;
            let (_, prior) = kf_predict(&t0, NonZeroUsize::MIN, &exact);
            let t1 = kf_update(&prior, truth(dt), &exact)?;
            Ok(kf_predict(&t1, NonZeroUsize::new(3).expect("nonzero"), &exact).0)
        };
        match run() {
            Ok(p) => worst = worst.max(p.distance(&truth(4.0 * dt))),
            Err(e) => return Check::failed(name, e),
        }
    }
    Check::new(name, worst < 1e-9, format!("max 3-step error {worst:.2e} m over {count} tracks"))
}

/// A camera above the ground looking down at a random ground target.
pub fn random_camera<R: Rng>(rng: &mut R) -> crate::Result<CameraModel> {
    let eye = Vector3::new(
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(2.0..30.0),
    );
    let target = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), 0.0);
    let focal = rng.random_range(300.0..1500.0);
    let size = (rng.random_range(240..1080), rng.random_range(320..1920));
    CameraModel::look_at(eye, target, focal, size)
}

/// Project then back-project ground points seen by random cameras.
pub fn geometry_round_trip(count: usize, seed: u64) -> Check {
    let name = "geometry_round_trip";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let run = |rng: &mut ChaCha8Rng| -> crate::Result<f64> {
            let cam = random_camera(rng)?;
            let (h, w) = cam.image_size();
            // Rejection-sample an in-view ground point within 60 m of the camera.
            loop {
                let pixel = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                let Ok(ground) = pixel_to_ground(&cam, pixel) else { continue };
                let c = cam.center();
                if (ground.x - c.x).hypot(ground.y - c.y) > 60.0 {
                    continue;
                }
                let Some(px) = project_ground_to_pixel(&cam, ground) else { continue };
                return Ok(pixel_to_ground(&cam, px)?.distance(&ground));
            }
        };
        match run(&mut rng) {
            Ok(e) => worst = worst.max(e),
            Err(e) => return Check::failed(name, e),
        }
    }
    Check::new(name, worst < 1e-9, format!("max round-trip error {worst:.2e} m over {count} cameras"))
}

/// Hand-counted micro-sequences and a clutter frame.
pub fn metrics_oracle() -> Check {
    let name = "metrics_oracle";
    let cfg = EvalConfig::default();
    let mut failures = Vec::new();
    for seq in oracle::micro_sequences() {
        match evaluate_tracking(&seq.gt, &seq.tracks, &cfg) {
            Ok(m) if m == seq.expected => {}
            Ok(m) => failures.push(format!("{}: got {m:?}", seq.name)),
            Err(e) => return Check::failed(name, e),
        }
    }
    let (gt, det, expected) = oracle::clutter_detection_frame();
    match evaluate_detection(&gt, &det, &cfg) {
        Ok(m) if m == expected => {}
        Ok(m) => failures.push(format!("clutter: got {m:?}")),
        Err(e) => return Check::failed(name, e),
    }
    let detail = if failures.is_empty() {
        "perfect, all_miss, one_switch and clutter match hand counts".to_string()
    } else {
        failures.join("; ")
    };
    Check::new(name, failures.is_empty(), detail)
}

/// Initial and final mean motion and appearance losses on the toy set.
pub fn toy_progress(seed: u64, steps: usize) -> crate::Result<(f64, f64, f64, f64)> {
    let toy = ToyConfig::default();
    let config = BranchConfig {
        dim: toy.dim,
        heads: 2,
        blocks: 1,
        ffn_dim: 32,
        max_lag: toy.max_lag,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = BranchParams::init(config, &mut rng)?;
    let windows = toy_windows(&toy, seed)?;
    let reports = |p: &BranchParams| -> crate::Result<Vec<LossReport>> {
        windows.iter().map(|w| Ok(forward_losses(p, w)?.report)).collect()
    };
    let initial = reports(&params)?;
    let out = train(&params, &windows, &TrainConfig { steps, seed, ..TrainConfig::default() })?;
    let fin = reports(&out.params)?;
    let mean = |r: &[LossReport], f: fn(&LossReport) -> f64| r.iter().map(f).sum::<f64>() / r.len() as f64;
    Ok((
        mean(&initial, |r| r.l_tmc),
        mean(&fin, |r| r.l_tmc),
        mean(&initial, |r| r.l_tac),
        mean(&fin, |r| r.l_tac),
    ))
}

/// Both toy losses at most halved within `steps` for every seed.
pub fn toy_training(seeds: u64, steps: usize) -> Check {
    let name = "toy_training";
    let mut worst: f64 = 0.0;
    let mut passed = 0;
    for seed in 0..seeds {
        match toy_progress(seed, steps) {
            Ok((t0, t1, a0, a1)) => {
                let ratio = (t1 / t0).max(a1 / a0);
                worst = worst.max(ratio);
                if ratio <= 0.5 {
                    passed += 1;
                }
            }
            Err(e) => return Check::failed(name, e),
        }
    }
    Check::new(
        name,
        passed == seeds,
        format!("{passed}/{seeds} seeds halve both losses in {steps} steps (worst final/initial {worst:.3})"),
    )
}

/// Every suite at the sizes used by the `selftest` command.
pub fn run_all() -> Vec<Check> {
    vec![
        hungarian_optimality(1000, 1),
        cost_oracles(100, 2),
        gradients(20, 3),
        kalman_exactness(100, 4),
        geometry_round_trip(1000, 5),
        metrics_oracle(),
        toy_training(5, 200),
    ]
}
