//! CLEAR-MOT, identity and detection metrics with distance gating.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::association::solve_assignment;
use crate::error::{Result, TrackError};
use crate::geometry::BevPoint;

/// Identified points per frame.
pub type IdFrames = [Vec<(usize, BevPoint)>];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tracking_gate: f64,
    pub detection_gate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tracking_gate: 1.0,
            detection_gate: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tracking_gate > 0.0 && self.detection_gate > 0.0)
            || !self.tracking_gate.is_finite()
            || !self.detection_gate.is_finite()
        {
            return Err(TrackError::InvalidConfig("evaluation gates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub idf1: f64,
    pub mota: f64,
    pub motp: f64,
    pub mt_pct: f64,
    pub ml_pct: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub gt: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub moda: f64,
    pub modp: f64,
    pub recall: f64,
    pub precision: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub gt: usize,
}

/// Tracking and detection metrics of one run. Percentages throughout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tracking: TrackingMetrics,
    pub detection: DetectionMetrics,
}

impl MetricReport {
    /// Column names of [`MetricReport::values`].
    pub const FIELDS: [&'static str; 17] = [
        "idf1", "mota", "motp", "mt_pct", "ml_pct", "moda", "modp", "recall", "precision", "tp",
        "fp", "fn", "idsw", "gt", "det_tp", "det_fp", "det_fn",
    ];

    pub fn values(&self) -> [f64; 17] {
        let t = &self.tracking;
        let d = &self.detection;
        [
            t.idf1,
            t.mota,
            t.motp,
            t.mt_pct,
            t.ml_pct,
            d.moda,
            d.modp,
            d.recall,
            d.precision,
            t.tp as f64,
            t.fp as f64,
            t.fn_ as f64,
            t.idsw as f64,
            t.gt as f64,
            d.tp as f64,
            d.fp as f64,
            d.fn_ as f64,
        ]
    }
}

/// Pairs strictly within `gate`, maximizing the number of pairs first and
/// minimizing total distance second.
fn gated_matching(a: &[BevPoint], b: &[BevPoint], gate: f64) -> Result<Vec<(usize, usize, f64)>> {
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    let big = gate * (a.len().max(b.len()) + 1) as f64;
    let dist = DMatrix::from_fn(a.len(), b.len(), |i, j| a[i].distance(&b[j]));
    let costs = dist.map(|d| if d < gate { d } else { big });
    Ok(solve_assignment(&costs)?
        .into_iter()
        .filter(|&(i, j)| dist[(i, j)] < gate)
        .map(|(i, j)| (i, j, dist[(i, j)]))
        .collect())
}

fn check_aligned(gt: usize, hyp: usize) -> Result<()> {
    if gt != hyp {
        return Err(TrackError::FrameMisalignment(format!(
            "{gt} ground-truth frames vs {hyp} hypothesis frames"
        )));
    }
    Ok(())
}

fn pct(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        100.0 * num / den
    } else {
        0.0
    }
}

pub fn evaluate_tracking(gt: &IdFrames, tracks: &IdFrames, cfg: &EvalConfig) -> Result<TrackingMetrics> {
    cfg.validate()?;
    check_aligned(gt.len(), tracks.len())?;
    let gate = cfg.tracking_gate;
    let mut out = TrackingMetrics::default();
    let mut prev: HashMap<usize, usize> = HashMap::new();
    let mut last_hyp: HashMap<usize, usize> = HashMap::new();
    let mut frames_present: BTreeMap<usize, usize> = BTreeMap::new();
    let mut frames_matched: BTreeMap<usize, usize> = BTreeMap::new();
    let mut overlap = 0.0;
    let mut pair_counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut hyp_total = 0usize;

    for (g, h) in gt.iter().zip(tracks) {
        out.gt += g.len();
        hyp_total += h.len();
        for (id, _) in g {
            *frames_present.entry(*id).or_default() += 1;
        }
        // Identity co-occurrence for the global assignment.
        for (gid, gp) in g {
            for (hid, hp) in h {
                if gp.distance(hp) < gate {
                    *pair_counts.entry((*gid, *hid)).or_default() += 1;
                }
            }
        }

        let mut matched: Vec<(usize, usize, f64)> = Vec::new();
        let mut g_used = vec![false; g.len()];
        let mut h_used = vec![false; h.len()];
        let h_index: HashMap<usize, usize> = h.iter().enumerate().map(|(j, (id, _))| (*id, j)).collect();
        for (i, (gid, gp)) in g.iter().enumerate() {
            if let Some(&j) = prev.get(gid).and_then(|hid| h_index.get(hid)) {
                let d = gp.distance(&h[j].1);
                if d < gate && !h_used[j] {
                    g_used[i] = true;
                    h_used[j] = true;
                    matched.push((i, j, d));
                }
            }
        }
        let gi: Vec<usize> = (0..g.len()).filter(|&i| !g_used[i]).collect();
        let hj: Vec<usize> = (0..h.len()).filter(|&j| !h_used[j]).collect();
        let ga: Vec<BevPoint> = gi.iter().map(|&i| g[i].1).collect();
        let hb: Vec<BevPoint> = hj.iter().map(|&j| h[j].1).collect();
        for (a, b, d) in gated_matching(&ga, &hb, gate)? {
            let (i, j) = (gi[a], hj[b]);
            let (gid, hid) = (g[i].0, h[j].0);
            if last_hyp.get(&gid).is_some_and(|&last| last != hid) {
                out.idsw += 1;
            }
            matched.push((i, j, d));
        }

        prev.clear();
        for &(i, j, d) in &matched {
            let (gid, hid) = (g[i].0, h[j].0);
            prev.insert(gid, hid);
            last_hyp.insert(gid, hid);
            *frames_matched.entry(gid).or_default() += 1;
            overlap += 1.0 - d / gate;
        }
        out.tp += matched.len();
        out.fn_ += g.len() - matched.len();
        out.fp += h.len() - matched.len();
    }

    out.mota = 100.0 * (1.0 - (out.fp + out.fn_ + out.idsw) as f64 / out.gt.max(1) as f64);
    out.motp = pct(overlap, out.tp as f64);
    let ids = frames_present.len() as f64;
    let ratio = |id: &usize, n: &usize| *frames_matched.get(id).unwrap_or(&0) as f64 / *n as f64;
    out.mt_pct = pct(frames_present.iter().filter(|(id, n)| ratio(id, n) >= 0.8).count() as f64, ids);
    out.ml_pct = pct(frames_present.iter().filter(|(id, n)| ratio(id, n) <= 0.2).count() as f64, ids);
    out.idf1 = identity_f1(&pair_counts, out.gt, hyp_total)?;
    Ok(out)
}

fn identity_f1(pair_counts: &BTreeMap<(usize, usize), usize>, gt_total: usize, hyp_total: usize) -> Result<f64> {
    if gt_total + hyp_total == 0 {
        return Ok(100.0);
    }
    let gids: Vec<usize> = pair_counts.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let hids: Vec<usize> = pair_counts.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().collect();
    let count = |i: usize, j: usize| *pair_counts.get(&(gids[i], hids[j])).unwrap_or(&0) as f64;
    let costs = DMatrix::from_fn(gids.len(), hids.len(), |i, j| -count(i, j));
    let idtp: f64 = solve_assignment(&costs)?.into_iter().map(|(i, j)| count(i, j)).sum();
    Ok(100.0 * 2.0 * idtp / (gt_total + hyp_total) as f64)
}

pub fn evaluate_detection(
    gt: &[Vec<BevPoint>],
    detections: &[Vec<BevPoint>],
    cfg: &EvalConfig,
) -> Result<DetectionMetrics> {
    cfg.validate()?;
    check_aligned(gt.len(), detections.len())?;
    let gate = cfg.detection_gate;
    let mut out = DetectionMetrics::default();
    let mut overlap = 0.0;
    for (g, d) in gt.iter().zip(detections) {
        let m = gated_matching(g, d, gate)?;
        out.gt += g.len();
        out.tp += m.len();
        out.fn_ += g.len() - m.len();
        out.fp += d.len() - m.len();
        overlap += m.iter().map(|(_, _, dist)| 1.0 - dist / gate).sum::<f64>();
    }
    out.moda = 100.0 * (1.0 - (out.fp + out.fn_) as f64 / out.gt.max(1) as f64);
    out.modp = pct(overlap, out.tp as f64);
    out.recall = pct(out.tp as f64, out.gt as f64);
    out.precision = pct(out.tp as f64, (out.tp + out.fp) as f64);
    Ok(out)
}

/// Mean and sample standard deviation of each report column.
pub fn aggregate(reports: &[MetricReport]) -> ([f64; 17], [f64; 17]) {
    let n = reports.len() as f64;
    let mut mean = [0.0; 17];
    let mut std = [0.0; 17];
    if reports.is_empty() {
        return (mean, std);
    }
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    if reports.len() > 1 {
        for r in reports {
            for ((s, v), m) in std.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m) * (v - m) / (n - 1.0);
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
    }
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> BevPoint {
        BevPoint::new(x, y)
    }

    #[test]
    fn misaligned_frames_rejected() {
        let gt = vec![vec![]; 3];
        let hyp = vec![vec![]; 2];
        assert!(matches!(
            evaluate_tracking(&gt, &hyp, &EvalConfig::default()),
            Err(TrackError::FrameMisalignment(_))
        ));
    }

    #[test]
    fn matching_prefers_more_pairs() {
        let a = [p(0.0, 0.0), p(1.0, 0.0)];
        let b = [p(0.5, 0.0), p(1.8, 0.0)];
        let m = gated_matching(&a, &b, 1.0).unwrap();
        assert_eq!(m.len(), 2);
    }

    #[test]
    fn continuity_keeps_previous_pair() {
        // Hypothesis 2 drifts closer to the ground truth than hypothesis 1,
        // but 1 is still within the gate so no switch is counted.
        let gt = vec![vec![(0, p(0.0, 0.0))], vec![(0, p(0.0, 0.0))]];
        let hyp = vec![
            vec![(1, p(0.1, 0.0))],
            vec![(1, p(0.8, 0.0)), (2, p(0.0, 0.05))],
        ];
        let m = evaluate_tracking(&gt, &hyp, &EvalConfig::default()).unwrap();
        assert_eq!((m.idsw, m.fp, m.fn_), (0, 1, 0));
    }
}
