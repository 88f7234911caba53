//! Multi-lag association costs, gated rectangular assignment and the
//! sliding-window track manager.

mod hungarian;
mod tracker;

pub use hungarian::{hungarian, solve_assignment};
pub use tracker::{
    step, AppearanceMode, AssociationResult, CostMode, FeatureSource, FrameOutput, MotionMode, Slot, TokenEncoder,
    TrackRow, Tracker, TrackerConfig, TrackerState, Trajectory,
};

use nalgebra::DMatrix;

use crate::error::{Result, TrackError};
use crate::geometry::BevPoint;

/// Costs between `rows` current detections and `cols` trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub tmc: DMatrix<f64>,
    pub tac: DMatrix<f64>,
    pub combined: DMatrix<f64>,
    pub alpha: f64,
}

impl CostMatrix {
    pub fn rows(&self) -> usize {
        self.combined.nrows()
    }

    pub fn cols(&self) -> usize {
        self.combined.ncols()
    }
}

/// Trajectory motion cost.
///
/// `slots[j][k-1]` is trajectory `j`'s location at lag `k` (`None` for ∅),
/// `motions[j][k-1]` the predicted motion for that slot and `fallback[j]`
/// the Kalman prediction used in place of `p + m` for ∅ slots. Entry
/// `(i, j)` sums the distance from `current[i]` to the estimate from every
/// lag.
pub fn tmc(
    current: &[BevPoint],
    slots: &[Vec<Option<BevPoint>>],
    motions: &[Vec<Option<[f64; 2]>>],
    fallback: &[BevPoint],
) -> Result<DMatrix<f64>> {
    if motions.len() != slots.len() || fallback.len() != slots.len() {
        return Err(TrackError::ShapeMismatch(format!(
            "{} trajectories, {} motion lists, {} fallbacks",
            slots.len(),
            motions.len(),
            fallback.len()
        )));
    }
    let mut estimates: Vec<Vec<BevPoint>> = Vec::with_capacity(slots.len());
    for (j, (s, m)) in slots.iter().zip(motions).enumerate() {
        let mut est = Vec::with_capacity(s.len());
        for (k, slot) in s.iter().enumerate() {
            est.push(match slot {
                Some(p) => {
                    let m = m.get(k).copied().flatten().ok_or(TrackError::MissingMotion {
                        trajectory: j,
                        lag: k + 1,
                    })?;
                    BevPoint::new(p.x + m[0], p.y + m[1])
                }
                None => fallback[j],
            });
        }
        estimates.push(est);
    }
    Ok(DMatrix::from_fn(current.len(), slots.len(), |i, j| {
        estimates[j].iter().map(|e| current[i].distance(e)).sum()
    }))
}

fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|s| (s - max).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trajectory appearance cost `−Σₖ Pr^{t−k}(j|i)`.
///
/// `past[j][k-1]` holds trajectory `j`'s feature at lag `k`. At each lag the
/// softmax runs over the trajectories present at that lag; ∅ slots get
/// probability 0.
pub fn tac(current: &[Vec<f64>], past: &[Vec<Option<Vec<f64>>>], max_lag: usize) -> Result<DMatrix<f64>> {
    let dim = current.first().map(Vec::len);
    let mismatched = current.iter().any(|f| Some(f.len()) != dim)
        || past
            .iter()
            .flatten()
            .flatten()
            .any(|f| dim.is_some_and(|d| f.len() != d));
    if mismatched {
        return Err(TrackError::ShapeMismatch("appearance feature widths differ".into()));
    }
    let mut out = DMatrix::zeros(current.len(), past.len());
    let mut probs = Vec::new();
    for k in 0..max_lag {
        let present: Vec<(usize, &Vec<f64>)> = past
            .iter()
            .enumerate()
            .filter_map(|(j, p)| p.get(k).and_then(|s| s.as_ref()).map(|f| (j, f)))
            .collect();
        if present.is_empty() {
            continue;
        }
        for (i, d) in current.iter().enumerate() {
            let logits: Vec<f64> = present.iter().map(|(_, f)| dot(d, f)).collect();
            softmax_into(&logits, &mut probs);
            for ((j, _), p) in present.iter().zip(&probs) {
                out[(i, *j)] -= p;
            }
        }
    }
    Ok(out)
}

/// `(1 − α)·tmc + α·tac`.
pub fn fuse(tmc: DMatrix<f64>, tac: DMatrix<f64>, alpha: f64) -> Result<CostMatrix> {
    if tmc.shape() != tac.shape() {
        return Err(TrackError::ShapeMismatch(format!(
            "tmc {:?} vs tac {:?}",
            tmc.shape(),
            tac.shape()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrackError::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let combined = tmc.zip_map(&tac, |m, a| (1.0 - alpha) * m + alpha * a);
    Ok(CostMatrix {
        tmc,
        tac,
        combined,
        alpha,
    })
}

/// `momentum·prev + (1 − momentum)·new`, scaled to unit length.
pub fn ema_aggregate(prev: &[f64], new: &[f64], momentum: f64) -> Vec<f64> {
    let mut v: Vec<f64> = prev
        .iter()
        .zip(new)
        .map(|(a, b)| momentum * a + (1.0 - momentum) * b)
        .collect();
    crate::simulator::normalize(&mut v);
    v
}

/// Single-reference appearance cost used in place of the multi-lag sum:
/// `−K·softmax_j(dᵢ·rⱼ)` over all trajectories.
pub fn ema_cost(current: &[Vec<f64>], references: &[Vec<f64>], max_lag: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(current.len(), references.len());
    if references.is_empty() {
        return out;
    }
    let mut probs = Vec::new();
    for (i, d) in current.iter().enumerate() {
        let logits: Vec<f64> = references.iter().map(|r| dot(d, r)).collect();
        softmax_into(&logits, &mut probs);
        for (j, p) in probs.iter().enumerate() {
            out[(i, j)] = -(max_lag as f64) * p;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tmc_zero_when_estimate_matches() {
        let c = tmc(
            &[BevPoint::new(0.0, 0.0)],
            &[vec![Some(BevPoint::new(0.0, 0.0))]],
            &[vec![Some([0.0, 0.0])]],
            &[BevPoint::new(9.0, 9.0)],
        )
        .unwrap();
        assert_eq!(c[(0, 0)], 0.0);
    }

    #[test]
    fn tmc_sums_over_lags() {
        let c = tmc(
            &[BevPoint::new(0.0, 0.0)],
            &[vec![Some(BevPoint::new(1.0, 1.0)), None]],
            &[vec![Some([2.0, 3.0]), None]],
            &[BevPoint::new(5.0, 12.0)],
        )
        .unwrap();
        assert!((c[(0, 0)] - 18.0).abs() < 1e-12);
    }

    #[test]
    fn tmc_requires_motion_for_present_slots() {
        let r = tmc(
            &[BevPoint::new(0.0, 0.0)],
            &[vec![Some(BevPoint::new(1.0, 1.0))]],
            &[vec![None]],
            &[BevPoint::new(0.0, 0.0)],
        );
        assert!(matches!(r, Err(TrackError::MissingMotion { trajectory: 0, lag: 1 })));
    }

    #[test]
    fn tac_single_trajectory_is_minus_k() {
        let f = vec![1.0, 0.0];
        let c = tac(std::slice::from_ref(&f), &[vec![Some(f.clone()); 3]], 3).unwrap();
        assert!((c[(0, 0)] + 3.0).abs() < 1e-15);
    }

    #[test]
    fn tac_identical_trajectories_split_evenly() {
        let f = vec![0.3, 0.4];
        let past = vec![vec![Some(f.clone()); 4], vec![Some(f.clone()); 4]];
        let c = tac(std::slice::from_ref(&f), &past, 4).unwrap();
        assert!((c[(0, 0)] + 2.0).abs() < 1e-15);
        assert!((c[(0, 1)] + 2.0).abs() < 1e-15);
    }

    #[test]
    fn tac_skips_empty_slots() {
        let past = vec![vec![None, Some(vec![1.0])], vec![Some(vec![5.0]), None]];
        let c = tac(&[vec![1.0]], &past, 2).unwrap();
        assert_eq!(c[(0, 0)], -1.0);
        assert_eq!(c[(0, 1)], -1.0);
    }

    #[test]
    fn tac_survives_huge_logits() {
        let c = tac(&[vec![1e4]], &[vec![Some(vec![1e4])], vec![Some(vec![-1e4])]], 1).unwrap();
        assert_eq!(c[(0, 0)], -1.0);
        assert_eq!(c[(0, 1)], 0.0);
    }

    #[test]
    fn fuse_endpoints_and_value_range_example() {
        let m = DMatrix::from_element(1, 1, 1000.0);
        let a = DMatrix::from_element(1, 1, -6.2);
        assert_eq!(fuse(m.clone(), a.clone(), 0.0).unwrap().combined, m);
        assert_eq!(fuse(m.clone(), a.clone(), 1.0).unwrap().combined, a);
        let c = fuse(m, a, 0.98).unwrap().combined[(0, 0)];
        assert!((c - 13.924).abs() < 1e-12);
    }

    #[test]
    fn fuse_rejects_bad_input() {
        let m = DMatrix::zeros(1, 2);
        assert!(fuse(m.clone(), DMatrix::zeros(2, 1), 0.5).is_err());
        assert!(fuse(m.clone(), m, 1.5).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let prev = vec![3.0, 4.0];
        let new = vec![0.0, 2.0];
        assert_eq!(ema_aggregate(&prev, &new, 1.0), vec![0.6, 0.8]);
        assert_eq!(ema_aggregate(&prev, &new, 0.0), vec![0.0, 1.0]);
        let v = ema_aggregate(&[1.0, 0.0], &[0.0, 1.0], 0.9);
        let n = (0.81f64 + 0.01).sqrt();
        assert!((v[0] - 0.9 / n).abs() < 1e-15 && (v[1] - 0.1 / n).abs() < 1e-15);
    }
}
