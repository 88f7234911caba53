//! Slow reference implementations written with plain loops over `Vec`s.
//! Used by the test suites and the `selftest` command to cross-check the
//! optimized code paths.

use rand::seq::index::sample;
use rand::Rng;

use crate::branches::{forward_losses, backward, BlockParams, BranchParams, TrainingWindow, TokenSet};
use crate::error::Result;
use crate::geometry::BevPoint;
use crate::metrics::{DetectionMetrics, TrackingMetrics};
use nalgebra::DMatrix;

pub type Rows = Vec<Vec<f64>>;

fn matmul(a: &Rows, w: &nalgebra::DMatrix<f64>) -> Rows {
    a.iter()
        .map(|row| {
            (0..w.ncols())
                .map(|c| (0..w.nrows()).map(|r| row[r] * w[(r, c)]).sum())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Rows, gamma: &nalgebra::DMatrix<f64>, beta: &nalgebra::DMatrix<f64>) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / sd * gamma[(0, c)] + beta[(0, c)])
                .collect()
        })
        .collect()
}

/// One pre-norm transformer block, evaluated element by element.
pub fn block_forward(p: &BlockParams, x: &Rows, heads: usize) -> Rows {
    let t = x.len();
    let e = x.first().map_or(0, Vec::len);
    let dh = e / heads;
    let h = layer_norm(x, &p.ln1_gamma, &p.ln1_beta);
    let (q, k, v) = (matmul(&h, &p.wq), matmul(&h, &p.wk), matmul(&h, &p.wv));
    let mut o = vec![vec![0.0; e]; t];
    for a in 0..heads {
        let cols = a * dh..(a + 1) * dh;
        for i in 0..t {
            let scores: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols.clone() {
                o[i][c] = (0..t).map(|j| exps[j] / z * v[j][c]).sum();
            }
        }
    }
    let attn = matmul(&o, &p.wo);
    let x1: Rows = (0..t)
        .map(|i| (0..e).map(|c| x[i][c] + attn[i][c]).collect())
        .collect();
    let h2 = layer_norm(&x1, &p.ln2_gamma, &p.ln2_beta);
    let mut z = matmul(&h2, &p.ff_w1);
    for row in &mut z {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v + p.ff_b1[(0, c)]).max(0.0);
        }
    }
    let ff = matmul(&z, &p.ff_w2);
    (0..t)
        .map(|i| (0..e).map(|c| x1[i][c] + ff[i][c] + p.ff_b2[(0, c)]).collect())
        .collect()
}

fn embedded_rows(tokens: &TokenSet) -> Rows {
    let e = tokens.dim();
    (0..tokens.len())
        .map(|r| {
            let lag = tokens.lags[r] as f64;
            (0..e)
                .map(|c| {
                    let angle = lag / 10000f64.powf((2 * (c / 2)) as f64 / e as f64);
                    tokens.features[(r, c)] + if c % 2 == 0 { angle.sin() } else { angle.cos() }
                })
                .collect()
        })
        .collect()
}

fn run(blocks: &[BlockParams], heads: usize, tokens: &TokenSet) -> Rows {
    let mut x = embedded_rows(tokens);
    for b in blocks {
        x = block_forward(b, &x, heads);
    }
    x
}

/// Motion per token; `None` at lag 0.
pub fn motion_forward(params: &BranchParams, tokens: &TokenSet) -> Vec<Option<[f64; 2]>> {
    let g = run(&params.motion_blocks, params.config.heads, tokens);
    g.iter()
        .zip(&tokens.lags)
        .map(|(row, &k)| {
            (k >= 1).then(|| {
                let mut m = [params.motion_head_b[(0, 0)], params.motion_head_b[(0, 1)]];
                for (c, v) in row.iter().enumerate() {
                    m[0] += v * params.motion_head_w[(c, 0)];
                    m[1] += v * params.motion_head_w[(c, 1)];
                }
                m
            })
        })
        .collect()
}

pub fn appearance_forward(params: &BranchParams, tokens: &TokenSet) -> Rows {
    run(&params.appearance_blocks, params.config.heads, tokens)
}

/// Worst relative error between analytic and central-difference gradients
/// for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub tensor: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Compares `backward` against central differences of `L_all` on up to
/// `per_tensor` randomly chosen entries of every tensor.
pub fn gradient_check<R: Rng>(
    params: &BranchParams,
    window: &TrainingWindow,
    per_tensor: usize,
    step: f64,
    rng: &mut R,
) -> Result<Vec<GradientCheck>> {
    let pass = forward_losses(params, window)?;
    let analytic = backward(params, &pass);
    let mut grads = Vec::new();
    analytic.for_each_tensor(|name, t| grads.push((name.to_string(), t.clone())));

    let mut out = Vec::with_capacity(grads.len());
    for (name, grad) in grads {
        let picks = sample(rng, grad.len(), per_tensor.min(grad.len())).into_vec();
        let mut worst: f64 = 0.0;
        for idx in &picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.for_each_tensor_mut(|n, t| {
                    if n == name {
                        t.as_mut_slice()[*idx] += delta;
                    }
                });
                Ok(forward_losses(&p, window)?.report.l_all)
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            worst = worst.max(relative_error(grad.as_slice()[*idx], numeric, GRADIENT_FLOOR));
        }
        out.push(GradientCheck {
            tensor: name,
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

/// Motion cost by an explicit triple loop over detections, trajectories
/// and lags.
pub fn tmc(
    current: &[BevPoint],
    slots: &[Vec<Option<BevPoint>>],
    motions: &[Vec<Option<[f64; 2]>>],
    fallback: &[BevPoint],
) -> Rows {
    let mut out = vec![vec![0.0; slots.len()]; current.len()];
    for (i, p) in current.iter().enumerate() {
        for j in 0..slots.len() {
            for k in 0..slots[j].len() {
                let (ex, ey) = match slots[j][k] {
                    Some(s) => {
                        let m = motions[j][k].expect("motion for occupied slot");
                        (s.x + m[0], s.y + m[1])
                    }
                    None => (fallback[j].x, fallback[j].y),
                };
                out[i][j] += ((p.x - ex).powi(2) + (p.y - ey).powi(2)).sqrt();
            }
        }
    }
    out
}

/// Appearance cost with the softmax written out per (detection, lag).
pub fn tac(current: &[Vec<f64>], past: &[Vec<Option<Vec<f64>>>], max_lag: usize) -> Rows {
    let dot = |a: &[f64], b: &[f64]| -> f64 { (0..a.len()).map(|c| a[c] * b[c]).sum() };
    let mut out = vec![vec![0.0; past.len()]; current.len()];
    for (i, d) in current.iter().enumerate() {
        for k in 0..max_lag {
            let mut max = f64::NEG_INFINITY;
            for p in past {
                if let Some(Some(f)) = p.get(k) {
                    max = max.max(dot(d, f));
                }
            }
            let mut z = 0.0;
            for p in past {
                if let Some(Some(f)) = p.get(k) {
                    z += (dot(d, f) - max).exp();
                }
            }
            for (j, p) in past.iter().enumerate() {
                if let Some(Some(f)) = p.get(k) {
                    out[i][j] -= (dot(d, f) - max).exp() / z;
                }
            }
        }
    }
    out
}

pub fn fuse(tmc: &Rows, tac: &Rows, alpha: f64) -> Rows {
    tmc.iter()
        .zip(tac)
        .map(|(a, b)| a.iter().zip(b).map(|(m, t)| (1.0 - alpha) * m + alpha * t).collect())
        .collect()
}

/// Mean over maps of the per-map mean squared difference.
pub fn loss_det(predicted: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    if predicted.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for (p, t) in predicted.iter().zip(target) {
        let mut sq = 0.0;
        for c in 0..p.len() {
            sq += (p[c] - t[c]) * (p[c] - t[c]);
        }
        total += sq / p.len() as f64;
    }
    total / predicted.len() as f64
}

pub fn loss_tmc(motions: &[[f64; 2]], offsets: &[[f64; 2]]) -> f64 {
    if motions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for n in 0..motions.len() {
        total += ((motions[n][0] - offsets[n][0]).powi(2) + (motions[n][1] - offsets[n][1]).powi(2)).sqrt();
    }
    total / motions.len() as f64
}

/// `−mean log Pr(correct)` over every (lag-0 token, past lag) pair whose
/// identity is present at that lag.
pub fn loss_tac(features: &Rows, lags: &[usize], identities: &[Option<usize>]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| -> f64 { (0..a.len()).map(|c| a[c] * b[c]).sum() };
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    let mut total = 0.0;
    let mut count = 0;
    for q in 0..features.len() {
        let Some(id) = identities[q] else { continue };
        if lags[q] != 0 {
            continue;
        }
        for k in 1..=max_lag {
            let cands: Vec<usize> = (0..features.len())
                .filter(|&r| lags[r] == k && identities[r].is_some())
                .collect();
            let Some(&target) = cands.iter().find(|&&r| identities[r] == Some(id)) else {
                continue;
            };
            let max = cands
                .iter()
                .map(|&r| dot(&features[q], &features[r]))
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = cands.iter().map(|&r| (dot(&features[q], &features[r]) - max).exp()).sum();
            total -= (dot(&features[q], &features[target]) - max) - z.ln();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn permutations(n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            rec(items, k + 1, f);
            items.swap(k, i);
        }
    }
    let mut items: Vec<usize> = (0..n).collect();
    rec(&mut items, 0, f);
}

/// Minimum total over all matchings of size `min(rows, cols)`, found by
/// enumerating permutations of the larger side.
pub fn brute_force_assignment(costs: &Rows) -> f64 {
    let r = costs.len();
    let c = costs.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    if r <= c {
        permutations(c, &mut |perm| {
            let total: f64 = (0..r).map(|i| costs[i][perm[i]]).sum();
            best = best.min(total);
        });
    } else {
        permutations(r, &mut |perm| {
            let total: f64 = (0..c).map(|j| costs[perm[j]][j]).sum();
            best = best.min(total);
        });
    }
    best
}

/// Gated matching cost by enumeration: every row either takes a distinct
/// column or stays unmatched at cost `gate`, and likewise for columns.
pub fn brute_force_gated(costs: &Rows, gate: f64) -> f64 {
    let r = costs.len();
    let c = costs.first().map_or(0, Vec::len);
    let n = r.max(c);
    let padded: Rows = (0..n)
        .map(|i| (0..n).map(|j| if i < r && j < c { costs[i][j] } else { gate }).collect())
        .collect();
    brute_force_assignment(&padded)
}

/// Small sequence with metric values worked out by hand.
#[derive(Debug, Clone)]
pub struct MicroSequence {
    pub name: &'static str,
    pub gt: Vec<Vec<(usize, BevPoint)>>,
    pub tracks: Vec<Vec<(usize, BevPoint)>>,
    pub expected: TrackingMetrics,
}

/// Two pedestrians over three frames: perfect tracks, no tracks, and one
/// identity switch on the third frame.
pub fn micro_sequences() -> Vec<MicroSequence> {
    let a = |t: usize| BevPoint::new(1.0 + t as f64, 1.0);
    let b = |t: usize| BevPoint::new(1.0 + t as f64, 6.0);
    let gt: Vec<Vec<(usize, BevPoint)>> = (0..3).map(|t| vec![(0, a(t)), (1, b(t))]).collect();
    let perfect: Vec<_> = (0..3).map(|t| vec![(10, a(t)), (11, b(t))]).collect();
    let switched: Vec<_> = (0..3)
        .map(|t| vec![(if t == 2 { 12 } else { 10 }, a(t)), (11, b(t))])
        .collect();
    vec![
        MicroSequence {
            name: "perfect",
            gt: gt.clone(),
            tracks: perfect,
            expected: TrackingMetrics {
                idf1: 100.0,
                mota: 100.0,
                motp: 100.0,
                mt_pct: 100.0,
                ml_pct: 0.0,
                tp: 6,
                fp: 0,
                fn_: 0,
                idsw: 0,
                gt: 6,
            },
        },
        MicroSequence {
            name: "all_miss",
            gt: gt.clone(),
            tracks: vec![Vec::new(); 3],
            expected: TrackingMetrics {
                idf1: 0.0,
                mota: 0.0,
                motp: 0.0,
                mt_pct: 0.0,
                ml_pct: 100.0,
                tp: 0,
                fp: 0,
                fn_: 6,
                idsw: 0,
                gt: 6,
            },
        },
        MicroSequence {
            name: "one_switch",
            gt,
            tracks: switched,
            // IDTP = 2 (0↔10) + 3 (1↔11) = 5 out of 6 + 6 points.
            expected: TrackingMetrics {
                idf1: 100.0 * 10.0 / 12.0,
                mota: 100.0 * (1.0 - 1.0 / 6.0),
                motp: 100.0,
                mt_pct: 100.0,
                ml_pct: 0.0,
                tp: 6,
                fp: 0,
                fn_: 0,
                idsw: 1,
                gt: 6,
            },
        },
    ]
}

/// Ten ground-truth points in one frame, the same points as detections,
/// plus five far-away clutter detections.
pub fn clutter_detection_frame() -> (Vec<Vec<BevPoint>>, Vec<Vec<BevPoint>>, DetectionMetrics) {
    let gt: Vec<BevPoint> = (0..10).map(|i| BevPoint::new(i as f64, 0.0)).collect();
    let mut det = gt.clone();
    det.extend((0..5).map(|i| BevPoint::new(i as f64, 8.0)));
    let expected = DetectionMetrics {
        moda: 50.0,
        modp: 100.0,
        recall: 100.0,
        precision: 100.0 * 10.0 / 15.0,
        tp: 10,
        fp: 5,
        fn_: 0,
        gt: 10,
    };
    (vec![gt], vec![det], expected)
}

/// Random instance shared by the cost oracles and the optimized paths.
pub struct CostInstance {
    pub current: Vec<BevPoint>,
    pub slots: Vec<Vec<Option<BevPoint>>>,
    pub motions: Vec<Vec<Option<[f64; 2]>>>,
    pub fallback: Vec<BevPoint>,
    pub current_features: Vec<Vec<f64>>,
    pub past_features: Vec<Vec<Option<Vec<f64>>>>,
    pub max_lag: usize,
}

fn point<R: Rng>(rng: &mut R) -> BevPoint {
    BevPoint::new(rng.random_range(0.0..12.0), rng.random_range(0.0..12.0))
}

fn unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| 3.0 * x / n).collect()
}

/// Random detections and trajectories with N ≤ 8, K ≤ 7, E ≤ 64 and about
/// a quarter of the slots empty.
pub fn random_cost_instance<R: Rng>(rng: &mut R) -> CostInstance {
    let n_cur = rng.random_range(1..=8);
    let n_past = rng.random_range(1..=8);
    let max_lag = rng.random_range(1..=7);
    let dim = rng.random_range(2..=64);
    let mut slots = Vec::new();
    let mut motions = Vec::new();
    let mut past_features = Vec::new();
    for _ in 0..n_past {
        let mut s = Vec::new();
        let mut m = Vec::new();
        let mut f = Vec::new();
        for _ in 0..max_lag {
            if rng.random_bool(0.75) {
                s.push(Some(point(rng)));
                m.push(Some([rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]));
                f.push(Some(unit(rng, dim)));
            } else {
                s.push(None);
                m.push(None);
                f.push(None);
            }
        }
        slots.push(s);
        motions.push(m);
        past_features.push(f);
    }
    CostInstance {
        current: (0..n_cur).map(|_| point(rng)).collect(),
        fallback: (0..n_past).map(|_| point(rng)).collect(),
        current_features: (0..n_cur).map(|_| unit(rng, dim)).collect(),
        slots,
        motions,
        past_features,
        max_lag,
    }
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            worst = worst.max((a[(r, c)] - b[r][c]).abs());
        }
    }
    worst
}

/// Integer matrix with entries in `{−2, …, 2}` and both sides ≤ 8.
pub fn random_integer_matrix<R: Rng>(rng: &mut R) -> DMatrix<f64> {
    let r = rng.random_range(1..=8);
    let c = rng.random_range(1..=8);
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-2i32..=2) as f64)
}
